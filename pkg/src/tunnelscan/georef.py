"""Seven-parameter similarity estimation and target-to-control assignment."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeoreferenceError, InputError, InvalidArgumentError, RankDeficiencyError


@dataclass(frozen=True)
class ControlPoint:
    name: str
    global_point: np.ndarray
    sigma: float = 0.002

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgumentError(f"control point {self.name}: sigma must be positive")


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"scale must be finite and positive, got {self.scale}")
        if abs(np.linalg.det(self.rotation) - 1) > 1e-9:
            raise InvalidArgumentError("rotation must have determinant +1")

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, float) @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


@dataclass
class SimilarityFit:
    transform: SimilarityTransform
    rms: float


def fit_similarity(local, global_, weights=None) -> SimilarityFit:
    """Weighted closed-form absolute orientation (Umeyama) with reflection guard."""
    A = np.asarray(local, float).reshape(-1, 3)
    B = np.asarray(global_, float).reshape(-1, 3)
    if len(A) != len(B):
        raise InvalidArgumentError("local and global point counts differ")
    if len(A) < 3:
        raise RankDeficiencyError(f"{len(A)} pairs, at least 3 required")
    w = np.ones(len(A)) if weights is None else np.asarray(weights, float)
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidArgumentError("weights must be non-negative and not all zero")
    # canonical order so the floating point result does not depend on input order
    order = np.lexsort(np.column_stack([A, B, w[:, None]]).T[::-1])
    A, B, w = A[order], B[order], w[order]
    w = w / w.sum()
    ca = w @ A
    cb = w @ B
    a = A - ca
    b = B - cb
    var_a = float(w @ (a**2).sum(1))
    sv_a = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if sv_a[1] <= 1e-9 * max(sv_a[0], 1e-300):
        raise RankDeficiencyError("control configuration is collinear")
    cov = (b * w[:, None]).T @ a
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1
    R = U @ np.diag(D) @ Vt
    scale = float((S * D).sum() / var_a)
    t = cb - scale * R @ ca
    T = SimilarityTransform(scale, R, t)
    res = T.apply(A) - B
    rms = float(np.sqrt((res**2).sum(1).mean()))
    return SimilarityFit(T, rms)


def read_control(path) -> list[ControlPoint]:
    """``name x y z [sigma]`` lines; ``#`` starts a comment."""
    out, seen = [], set()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read control file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise InputError(f"{path}:{n}: expected 'name x y z [sigma]'")
        name = parts[0]
        if name in seen:
            raise InputError(f"{path}:{n}: duplicate control point {name}")
        seen.add(name)
        try:
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise InputError(f"{path}:{n}: {exc}") from exc
        sigma = vals[3] if len(vals) == 4 else 0.002
        out.append(ControlPoint(name, np.array(vals[:3]), sigma))
    return out


@dataclass
class Georeference:
    assignment: dict[int, str]  # local target index -> control name
    transform: SimilarityTransform
    rms: float
    n_hypotheses: int


def _pair_dists(P):
    return np.array([np.linalg.norm(P[0] - P[1]), np.linalg.norm(P[0] - P[2]), np.linalg.norm(P[1] - P[2])])


def assign_and_estimate(
    local_points,
    control: list[ControlPoint],
    inlier_radius: float = 0.02,
    ratio_tolerance: float = 0.05,
    seed: int = 0,
    max_hypotheses: int = 20000,
) -> Georeference:
    """Find the injective local-target to control-point assignment with the largest consensus.

    Hypotheses pair a local triple with an ordered control triple; pairs
    whose pairwise-distance ratios disagree by more than ``ratio_tolerance``
    are skipped before fitting.  Enumeration is exhaustive unless the count
    exceeds ``max_hypotheses``, in which case a seeded random subset is used.
    """
    L = np.asarray(local_points, float).reshape(-1, 3)
    G = np.array([c.global_point for c in control], float).reshape(-1, 3)
    if len(L) < 3 or len(G) < 3:
        raise GeoreferenceError(f"need >= 3 local targets and control points, got {len(L)} and {len(G)}")
    names = [c.name for c in control]
    sig = np.array([c.sigma for c in control])

    hyps = [(lt, ct) for lt in itertools.combinations(range(len(L)), 3)
            for ct in itertools.permutations(range(len(G)), 3)]
    if len(hyps) > max_hypotheses:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(hyps), max_hypotheses, replace=False))
        hyps = [hyps[i] for i in pick]

    best_key, best = None, None
    tested = 0
    for lt, ct in hyps:
        dl = _pair_dists(L[list(lt)])
        dg = _pair_dists(G[list(ct)])
        if np.any(dl <= 0) or np.any(dg <= 0):
            continue
        ratios = dg / dl
        if ratios.max() - ratios.min() > ratio_tolerance * ratios.mean():
            continue
        try:
            fit = fit_similarity(L[list(lt)], G[list(ct)])
        except RankDeficiencyError:
            continue
        tested += 1
        assign = _consensus(fit.transform.apply(L), G, inlier_radius)
        if len(assign) < 3:
            continue
        li = sorted(assign)
        try:
            refit = fit_similarity(L[li], G[[assign[i] for i in li]], 1 / sig[[assign[i] for i in li]] ** 2)
        except RankDeficiencyError:
            continue
        assign2 = _consensus(refit.transform.apply(L), G, inlier_radius)
        if len(assign2) >= len(assign):
            li = sorted(assign2)
            assign = assign2
            refit = fit_similarity(L[li], G[[assign[i] for i in li]], 1 / sig[[assign[i] for i in li]] ** 2)
        key = (-len(assign), round(refit.rms, 12), tuple(sorted(assign.items())))
        if best_key is None or key < best_key:
            best_key, best = key, (assign, refit)
    if best is None:
        raise GeoreferenceError("no assignment hypothesis reached 3 inliers")
    assign, fit = best
    return Georeference({i: names[j] for i, j in sorted(assign.items())}, fit.transform, fit.rms, tested)


def _consensus(mapped: np.ndarray, G: np.ndarray, radius: float) -> dict[int, int]:
    """Greedy injective nearest assignment within ``radius``, closest pairs first."""
    d = np.linalg.norm(mapped[:, None, :] - G[None, :, :], axis=2)
    cand = np.argwhere(d < radius)
    order = np.lexsort((cand[:, 1], cand[:, 0], d[cand[:, 0], cand[:, 1]]))
    used_l, used_g, out = set(), set(), {}
    for i, j in cand[order]:
        if i in used_l or j in used_g:
            continue
        used_l.add(int(i))
        used_g.add(int(j))
        out[int(i)] = int(j)
    return out
