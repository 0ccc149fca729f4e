"""Bundle block adjustment with point elimination from the normal equations.

Unknowns are a rotation increment per image (composed on the right of the
stored matrix, ``R <- R Exp(w)``), optionally camera centers (shared by
images of a ``center_group``) and one 3D point per track.  Each iteration
builds the normal equations, reduces them onto the pose parameters with
the per-track 3x3 blocks, solves the damped reduced system and recovers
the point updates by back-substitution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateGeometryError,
    GaugeDeficiencyError,
    InvalidArgumentError,
    InvalidDatasetError,
    NonConvergenceError,
)
from .features import FeatureTrack
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    matrix_to_rotvec,
    orthonormalize,
    rotvec_to_matrix,
    skew,
    sweep_rotation,
    triangulate,
)

DEGENERATE_CONDITION = 1e10
MAX_REJECTS = 5


@dataclass
class ControlObservation:
    track_index: int
    point: np.ndarray
    sigma: float


@dataclass
class AdjustmentProblem:
    image_ids: list[str]
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    tracks: list[FeatureTrack]
    points: np.ndarray  # (n_tracks, 3) initial values
    observation_sigma: float = 1.0
    mode: str = "local"
    control: list[ControlObservation] = field(default_factory=list)
    gauge_sigma: float = 1e-4  # rad, soft constraint on net roll about the baseline
    center_groups: list[int] | None = None  # poses sharing one center parameter
    gauge_reference: list[np.ndarray] | None = None  # rotations the roll penalty refers to

    def __post_init__(self):
        if self.mode not in ("local", "global"):
            raise InvalidArgumentError(f"unknown adjustment mode {self.mode!r}")
        if len(self.image_ids) != len(self.poses):
            raise InvalidArgumentError("image_ids and poses differ in length")
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) != len(self.tracks):
            raise InvalidArgumentError("one initial point per track required")
        known = set(self.image_ids)
        for t in self.tracks:
            for iid, _ in t.observations:
                if iid not in known:
                    raise InvalidArgumentError(f"track {t.track_id} references unknown image {iid}")
        if self.center_groups is None:
            self.center_groups = list(range(len(self.poses)))
        if self.gauge_reference is None:
            self.gauge_reference = [p.rotation.copy() for p in self.poses]
        if self.mode == "local" and not any(p.fixed_position for p in self.poses):
            raise GaugeDeficiencyError("local adjustment needs fixed camera centers")

    def observation_arrays(self):
        index = {iid: i for i, iid in enumerate(self.image_ids)}
        pose_idx, track_idx, uv = [], [], []
        for j, t in enumerate(self.tracks):
            for iid, xy in t.observations:
                pose_idx.append(index[iid])
                track_idx.append(j)
                uv.append(xy)
        return np.array(pose_idx, int), np.array(track_idx, int), np.array(uv, float).reshape(-1, 2)


@dataclass
class Weights:
    pixel: np.ndarray  # per observation, 1/sigma^2
    gauge: float | None
    control: np.ndarray  # per control observation, 1/sigma^2


def weight_observations(problem: AdjustmentProblem, strategy: str | None = None) -> Weights:
    """Local: isotropic pixel weights plus the roll penalty.  Global: pixel weights plus control priors."""
    strategy = strategy or problem.mode
    pose_idx, _, _ = problem.observation_arrays()
    pixel = np.full(len(pose_idx), 1.0 / problem.observation_sigma**2)
    if strategy == "local":
        return Weights(pixel, 1.0 / problem.gauge_sigma**2, np.zeros(0))
    if strategy == "global":
        return Weights(pixel, None, np.array([1.0 / c.sigma**2 for c in problem.control]))
    raise InvalidArgumentError(f"unknown weighting strategy {strategy!r}")


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    candidate_cost: float
    lam: float
    accepted: bool


@dataclass
class AdjustmentReport:
    iterations: list[IterationRecord]
    rms_before: float
    rms_after: float
    converged: bool
    removed_tracks: list[int]
    cost_breakdown: dict[str, float]

    def to_text(self) -> str:
        lines = ["iter cost candidate lambda accepted"]
        for r in self.iterations:
            lines.append(f"{r.iteration} {r.cost:.6e} {r.candidate_cost:.6e} {r.lam:.1e} {int(r.accepted)}")
        lines.append(f"rms_before_px {self.rms_before:.6f}")
        lines.append(f"rms_after_px {self.rms_after:.6f}")
        lines.append(f"converged {int(self.converged)}")
        lines.append(f"removed_tracks {len(self.removed_tracks)}")
        for k, v in self.cost_breakdown.items():
            lines.append(f"contribution_{k} {v:.6e}")
        return "\n".join(lines) + "\n"


@dataclass
class AdjustmentResult:
    poses: list[CameraPose]
    points: np.ndarray
    active: np.ndarray  # bool per track, False where removed as degenerate
    report: AdjustmentReport


# ----------------------------------------------------------------------------- residuals
def collinearity_jacobian(R, C, X, intr: CameraIntrinsics, uv):
    """Residual (projection - observation) and its Jacobians.

    Vectorized over leading axes.  Returns ``r`` (..., 2) and Jacobians with
    respect to the right rotation increment, the center and the point, each
    (..., 2, 3).
    """
    d = X - C
    p = np.einsum("...ij,...j->...i", R, d)
    z = p[..., 2]
    f = intr.focal_length
    cx, cy = intr.principal_point
    r = np.stack([f * p[..., 0] / z + cx, f * p[..., 1] / z + cy], axis=-1) - uv
    dp = np.zeros(p.shape[:-1] + (2, 3))
    dp[..., 0, 0] = f / z
    dp[..., 1, 1] = f / z
    dp[..., 0, 2] = -f * p[..., 0] / z**2
    dp[..., 1, 2] = -f * p[..., 1] / z**2
    JX = dp @ R
    Jw = -(JX @ skew(d))
    return r, Jw, -JX, JX


def _log_rotation_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(phi)
    K = skew(phi)
    if th < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / th**2 - (1 + np.cos(th)) / (2 * th * np.sin(th))
    return np.eye(3) + 0.5 * K + coef * K @ K


class _State:
    def __init__(self, rotations, centers, points):
        self.rotations = rotations  # (n_pose, 3, 3)
        self.centers = centers  # (n_group, 3)
        self.points = points  # (n_track, 3)

    def copy(self):
        return _State(self.rotations.copy(), self.centers.copy(), self.points.copy())


class _Solver:
    def __init__(self, problem: AdjustmentProblem, weights: Weights):
        self.pb = problem
        self.w = weights
        self.pose_idx, self.track_idx, self.uv = problem.observation_arrays()
        groups = problem.center_groups
        self.group_ids = sorted(set(groups))
        gmap = {g: k for k, g in enumerate(self.group_ids)}
        self.pose_group = np.array([gmap[g] for g in groups], int)
        n_pose = len(problem.poses)
        # a group is free unless any member is fixed
        fixed = np.zeros(len(self.group_ids), bool)
        for i, p in enumerate(problem.poses):
            fixed[self.pose_group[i]] |= p.fixed_position
        self.group_fixed = fixed
        slot = np.full(len(self.group_ids), -1)
        slot[~fixed] = np.arange((~fixed).sum())
        self.n_params = 3 * n_pose + 3 * int((~fixed).sum())
        dummy = self.n_params
        self.dummy = dummy
        cols = np.empty((len(self.pose_idx), 6), int)
        cols[:, :3] = 3 * self.pose_idx[:, None] + np.arange(3)
        gs = slot[self.pose_group[self.pose_idx]]
        cols[:, 3:] = np.where(gs[:, None] >= 0, 3 * n_pose + 3 * gs[:, None] + np.arange(3), dummy)
        self.cols = cols
        self.group_slot = slot
        self.control_tracks = np.array([c.track_index for c in problem.control], int)
        self.control_points = np.array([c.point for c in problem.control], float).reshape(-1, 3)
        self.active = np.ones(len(problem.tracks), bool)
        self._pairs()

    def _pairs(self):
        by_track: dict[int, list[int]] = {}
        for o, j in enumerate(self.track_idx):
            if self.active[j]:
                by_track.setdefault(int(j), []).append(o)
        p1, p2 = [], []
        for obs in by_track.values():
            for a in obs:
                for b in obs:
                    p1.append(a)
                    p2.append(b)
        self.pair1 = np.array(p1, int)
        self.pair2 = np.array(p2, int)
        self.obs_active = self.active[self.track_idx]

    def initial_state(self) -> _State:
        pb = self.pb
        rot = np.array([p.rotation for p in pb.poses])
        centers = np.zeros((len(self.group_ids), 3))
        for i, p in enumerate(pb.poses):
            centers[self.pose_group[i]] = p.center
        return _State(rot, centers, pb.points.copy())

    # ---------------------------------------------------------------- costs
    def _gauge(self, st: _State):
        if self.w.gauge is None:
            return None, None
        n = len(st.rotations)
        sw = np.sqrt(self.w.gauge)
        phis = [matrix_to_rotvec(R0.T @ R) for R0, R in zip(self.pb.gauge_reference, st.rotations)]
        g = sw * float(np.mean([phi[0] for phi in phis]))
        J = np.zeros(self.n_params)
        for i, phi in enumerate(phis):
            J[3 * i:3 * i + 3] = sw / n * _log_rotation_right_jacobian_inv(phi)[0]
        return g, J

    def residuals(self, st: _State):
        o = self.obs_active
        R = st.rotations[self.pose_idx[o]]
        C = st.centers[self.pose_group[self.pose_idx[o]]]
        X = st.points[self.track_idx[o]]
        r, *_ = collinearity_jacobian(R, C, X, self.pb.intrinsics, self.uv[o])
        return r

    def breakdown(self, st: _State) -> dict[str, float]:
        """Square root of the weighted squared residual sum per observation class."""
        r = self.residuals(st)
        out = {"pixel": float(np.sqrt((self.w.pixel[self.obs_active][:, None] * r**2).sum()))}
        g, _ = self._gauge(st)
        if g is not None:
            out["gauge"] = abs(g)
        if len(self.control_tracks):
            dc = st.points[self.control_tracks] - self.control_points
            out["control"] = float(np.sqrt((self.w.control[:, None] * dc**2).sum()))
        return out

    def cost(self, st: _State) -> float:
        return float(sum(v**2 for v in self.breakdown(st).values()))

    def rms(self, st: _State) -> float:
        r = self.residuals(st)
        return float(np.sqrt((r**2).sum(axis=1).mean())) if len(r) else 0.0

    # ---------------------------------------------------------------- normal equations
    def assemble(self, st: _State):
        o = np.nonzero(self.obs_active)[0]
        R = st.rotations[self.pose_idx[o]]
        C = st.centers[self.pose_group[self.pose_idx[o]]]
        X = st.points[self.track_idx[o]]
        r, Jw, Jc, JX = collinearity_jacobian(R, C, X, self.pb.intrinsics, self.uv[o])
        sw = np.sqrt(self.w.pixel[o])[:, None]
        r = r * sw
        A = np.concatenate([Jw, Jc], axis=2) * sw[..., None]  # (n, 2, 6)
        B = JX * sw[..., None]  # (n, 2, 3)

        P = self.n_params + 1
        cols = self.cols[o]
        U = np.zeros((P, P))
        np.add.at(U, (cols[:, :, None], cols[:, None, :]), np.einsum("nki,nkj->nij", A, A))
        ga = np.zeros(P)
        np.add.at(ga, cols, np.einsum("nki,nk->ni", A, r))
        n_tr = len(self.pb.tracks)
        V = np.zeros((n_tr, 3, 3))
        np.add.at(V, self.track_idx[o], np.einsum("nki,nkj->nij", B, B))
        gb = np.zeros((n_tr, 3))
        np.add.at(gb, self.track_idx[o], np.einsum("nki,nk->ni", B, r))
        W = np.zeros((len(self.track_idx), 6, 3))
        W[o] = np.einsum("nki,nkj->nij", A, B)
        if len(self.control_tracks):
            wc = self.w.control
            np.add.at(V, self.control_tracks, wc[:, None, None] * np.eye(3))
            np.add.at(gb, self.control_tracks, wc[:, None] * (st.points[self.control_tracks] - self.control_points))
        U = U[:-1, :-1]
        ga = ga[:-1]
        g, Jg = self._gauge(st)
        if g is not None:
            U += np.outer(Jg, Jg)
            ga += Jg * g
        return U, ga, V, gb, W

    def reduce(self, U, ga, V, gb, W):
        """Eliminate point blocks: S = U - sum W V^-1 W^T, b = -ga + sum W V^-1 gb."""
        Vinv = np.zeros_like(V)
        act = self.active
        Vinv[act] = np.linalg.inv(V[act])
        P = self.n_params + 1
        S = np.zeros((P, P))
        S[:-1, :-1] = U
        j = self.track_idx[self.pair1]
        contrib = W[self.pair1] @ Vinv[j] @ np.transpose(W[self.pair2], (0, 2, 1))
        np.add.at(S, (self.cols[self.pair1][:, :, None], self.cols[self.pair2][:, None, :]), -contrib)
        b = np.zeros(P)
        b[:-1] = -ga
        o = np.nonzero(self.obs_active)[0]
        np.add.at(b, self.cols[o], np.einsum("nij,njk,nk->ni", W[o], Vinv[self.track_idx[o]], gb[self.track_idx[o]]))
        return S[:-1, :-1], b[:-1], Vinv

    def back_substitute(self, da, Vinv, gb, W):
        pad = np.append(da, 0.0)
        o = np.nonzero(self.obs_active)[0]
        rhs = -gb.copy()
        np.add.at(rhs, self.track_idx[o], -np.einsum("nij,ni->nj", W[o], pad[self.cols[o]]))
        return np.einsum("nij,nj->ni", Vinv, rhs)

    def apply(self, st: _State, da, dx) -> _State:
        new = st.copy()
        n_pose = len(st.rotations)
        for i in range(n_pose):
            new.rotations[i] = orthonormalize(st.rotations[i] @ rotvec_to_matrix(da[3 * i:3 * i + 3]))
        for g, s in enumerate(self.group_slot):
            if s >= 0:
                new.centers[g] = st.centers[g] + da[3 * n_pose + 3 * s:3 * n_pose + 3 * s + 3]
        new.points = st.points + np.where(self.active[:, None], dx, 0.0)
        return new

    def flag_degenerate(self, V) -> list[int]:
        removed = []
        for j in np.nonzero(self.active)[0]:
            if np.linalg.cond(V[j]) > DEGENERATE_CONDITION:
                self.active[j] = False
                removed.append(int(j))
        if removed:
            self._pairs()
        return removed


def full_normal_step(U, ga, V, gb, W, solver: _Solver, damping: np.ndarray):
    """Reference solve of the unreduced normal equations (testing aid)."""
    P = solver.n_params
    act = np.nonzero(solver.active)[0]
    n = P + 3 * len(act)
    N = np.zeros((n, n))
    rhs = np.zeros(n)
    N[:P, :P] = U + damping
    rhs[:P] = -ga
    pos = {int(j): P + 3 * k for k, j in enumerate(act)}
    for j in act:
        q = pos[int(j)]
        N[q:q + 3, q:q + 3] = V[j]
        rhs[q:q + 3] = -gb[j]
    for o in np.nonzero(solver.obs_active)[0]:
        q = pos[int(solver.track_idx[o])]
        for k, c in enumerate(solver.cols[o]):
            if c < P:
                N[c, q:q + 3] += W[o, k]
                N[q:q + 3, c] += W[o, k]
    sol = np.linalg.solve(N, rhs)
    return sol[:P]


def solve(
    problem: AdjustmentProblem,
    tol: float = 1e-8,
    max_iter: int = 50,
    weights: Weights | None = None,
    callback: Callable | None = None,
) -> AdjustmentResult:
    """Levenberg-damped Gauss-Newton on the reduced normal equations.

    ``callback(solver, state, (U, ga, V, gb, W), damping, pose_step)`` is
    invoked for every attempted step.
    """
    weights = weights or weight_observations(problem)
    sv = _Solver(problem, weights)
    st = sv.initial_state()
    if len(sv.pose_idx) == 0:
        raise InvalidDatasetError("adjustment has no observations")
    rms_before = sv.rms(st)
    cost = sv.cost(st)
    lam = 1e-3
    rejects = 0
    records: list[IterationRecord] = []
    removed: list[int] = []
    converged = False
    checked_gauge = False

    for it in range(1, max_iter + 1):
        U, ga, V, gb, W = sv.assemble(st)
        newly = sv.flag_degenerate(V)
        if newly:
            removed += newly
            cost = sv.cost(st)
            U, ga, V, gb, W = sv.assemble(st)
        S, b, Vinv = sv.reduce(U, ga, V, gb, W)
        if not checked_gauge:
            ev = np.linalg.eigvalsh(S)
            if ev[0] <= max(ev[-1], 1e-300) * 1e-13:
                raise GaugeDeficiencyError(
                    f"reduced normal system is rank deficient (eigenvalue ratio {ev[0] / ev[-1]:.2e})"
                )
            checked_gauge = True
        damping = lam * float(np.mean(np.diag(S))) * np.eye(len(S))
        da = np.linalg.solve(S + damping, b)
        dx = sv.back_substitute(da, Vinv, gb, W)
        if callback is not None:
            callback(sv, st, (U, ga, V, gb, W), damping, da)
        cand = sv.apply(st, da, dx)
        new_cost = sv.cost(cand)
        step_norm = float(np.sqrt(np.sum(da**2) + np.sum(dx[sv.active] ** 2)))
        accepted = new_cost < cost
        records.append(IterationRecord(it, cost, new_cost, lam, accepted))
        if accepted:
            rel = (cost - new_cost) / max(cost, 1e-300)
            st, cost = cand, new_cost
            lam = max(lam / 10, 1e-12)
            rejects = 0
            if rel < tol or step_norm < tol:
                converged = True
                break
        else:
            # a rejected step that changes nothing measurable means we are at the floor
            if step_norm < tol or new_cost - cost <= 1e-12 * max(cost, 1e-300) or cost < 1e-24:
                converged = True
                break
            lam *= 10
            rejects += 1
            if rejects >= MAX_REJECTS:
                raise NonConvergenceError(f"cost increased in {MAX_REJECTS} consecutive damped steps")

    poses = []
    for i, p in enumerate(problem.poses):
        poses.append(CameraPose(st.rotations[i], st.centers[sv.pose_group[i]].copy(), p.fixed_position))
    # fixed centers are passed through untouched
    for i, p in enumerate(problem.poses):
        if sv.group_fixed[sv.pose_group[i]]:
            poses[i] = CameraPose(st.rotations[i], p.center.copy(), p.fixed_position)
    report = AdjustmentReport(records, rms_before, sv.rms(st), converged, removed, sv.breakdown(st))
    return AdjustmentResult(poses, st.points, sv.active.copy(), report)


def cost_breakdown(problem: AdjustmentProblem, weights: Weights | None = None) -> dict[str, float]:
    """Weighted contribution of each observation class at the problem's current values."""
    sv = _Solver(problem, weights or weight_observations(problem))
    return sv.breakdown(sv.initial_state())


# ----------------------------------------------------------------------------- initialization
@dataclass
class LocalInitialization:
    image_ids: list[str]
    poses: list[CameraPose]
    tracks: list[FeatureTrack]
    points: np.ndarray


def initial_pose(tripod: int, rotation_index: int, n_rotations: int) -> CameraPose:
    center = np.array([float(tripod), 0.0, 0.0])
    return CameraPose(sweep_rotation(2 * np.pi * rotation_index / n_rotations), center, fixed_position=True)


def initialize_local(
    images: Sequence[tuple[str, int, int]],
    tracks: Sequence[FeatureTrack],
    intrinsics: CameraIntrinsics,
    n_rotations: dict[int, int] | None = None,
    min_angle_deg: float = 0.05,
) -> LocalInitialization:
    """Initial sweep poses for ``(image_id, tripod, rotation_index)`` and triangulated tracks.

    Tracks that cannot be triangulated are dropped.
    """
    per_tripod: dict[int, list[int]] = {0: [], 1: []}
    for _, t, k in images:
        if t not in per_tripod:
            raise InvalidDatasetError(f"tripod index {t} outside {{0, 1}}")
        per_tripod[t].append(k)
    for t, ks in per_tripod.items():
        if len(ks) < 2:
            raise InvalidDatasetError(f"tripod {t} has {len(ks)} images, at least 2 required")
    if n_rotations is None:
        n_rotations = {t: len(ks) for t, ks in per_tripod.items()}
    ids = [iid for iid, _, _ in images]
    poses = [initial_pose(t, k, n_rotations[t]) for _, t, k in images]
    pose_of = dict(zip(ids, poses))
    kept, points = [], []
    for tr in tracks:
        obs = [(pose_of[iid], intrinsics, uv) for iid, uv in tr.observations if iid in pose_of]
        if len(obs) < 2:
            continue
        try:
            tri = triangulate(obs, min_angle_deg=min_angle_deg)
        except DegenerateGeometryError:
            continue
        if not np.all(np.isfinite(tri.point)):
            continue
        kept.append(tr)
        points.append(tri.point)
    return LocalInitialization(ids, poses, kept, np.array(points, float).reshape(-1, 3))


def solve_global(
    local: AdjustmentResult,
    problem: AdjustmentProblem,
    similarity,
    control: list[ControlObservation],
    tol: float = 1e-8,
    max_iter: int = 50,
    callback: Callable | None = None,
) -> AdjustmentResult:
    """Map a local solution through ``similarity`` and re-adjust with free centers and control priors."""
    poses = [
        CameraPose(orthonormalize(p.rotation @ similarity.rotation.T), similarity.apply(p.center), False)
        for p in local.poses
    ]
    points = similarity.apply(local.points)
    sigma = problem.observation_sigma
    keep = np.nonzero(local.active)[0]
    remap = {int(j): k for k, j in enumerate(keep)}
    tracks = [problem.tracks[j] for j in keep]
    ctrl = [ControlObservation(remap[c.track_index], np.asarray(c.point, float), c.sigma)
            for c in control if c.track_index in remap]
    gp = AdjustmentProblem(
        image_ids=list(problem.image_ids),
        poses=poses,
        intrinsics=problem.intrinsics,
        tracks=tracks,
        points=points[keep],
        observation_sigma=sigma,
        mode="global",
        control=ctrl,
        center_groups=list(problem.center_groups),
    )
    res = solve(gp, tol=tol, max_iter=max_iter, callback=callback)
    full_points = np.full_like(points, np.nan)
    full_points[keep] = res.points
    active = np.zeros(len(points), bool)
    active[keep] = res.active
    return AdjustmentResult(res.poses, full_points, active, res.report)
