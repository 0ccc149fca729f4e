"""Tie-point detection, description, matching and multi-view track building.

Blobs are scale-space maxima of the scale-normalized Hessian determinant;
descriptors are 64-dim sums of oriented gradient responses over a 4x4
grid of sub-regions (SURF-like).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import InsufficientMatchesError, InvalidArgumentError
from .imageprep import PreparedImage

SIGMA0 = 1.6
LEVELS_PER_OCTAVE = 3
N_LEVELS = 11
SINGLE_CANDIDATE_MAX_DISTANCE = 0.25
EXACT_NN_LIMIT = 2000

_KXX = np.array([[1.0, -2.0, 1.0]], dtype=np.float32)
_KYY = _KXX.T.copy()
_KXY = np.array([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]], dtype=np.float32) / 4
_KX = np.array([[-0.5, 0.0, 0.5]], dtype=np.float32)
_KY = _KX.T.copy()


@dataclass
class Feature:
    image_id: str
    position: np.ndarray
    scale: float
    orientation: float
    descriptor: np.ndarray
    response: float


@dataclass
class FeatureSet:
    """All features of one image, stored column-wise."""

    image_id: str
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    orientations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 64)))
    responses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Feature:
        return Feature(self.image_id, self.positions[i], float(self.scales[i]), float(self.orientations[i]),
                       self.descriptors[i], float(self.responses[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.image_id, self.positions[idx], self.scales[idx], self.orientations[idx],
                          self.descriptors[idx], self.responses[idx])


@dataclass
class FeatureTrack:
    track_id: int
    observations: list[tuple[str, np.ndarray]]
    tripods: list[int]
    feature_refs: list[tuple[str, int]] = field(default_factory=list)
    latent_point: np.ndarray | None = None

    @property
    def images_per_tripod(self) -> tuple[int, int]:
        return (self.tripods.count(0), self.tripods.count(1))

    @property
    def image_ids(self) -> list[str]:
        return [iid for iid, _ in self.observations]

    def __len__(self) -> int:
        return len(self.observations)


# ----------------------------------------------------------------------------- detection
def _scale_space(img: np.ndarray, n_levels: int = N_LEVELS):
    sigmas = SIGMA0 * 2.0 ** (np.arange(n_levels) / LEVELS_PER_OCTAVE)
    blurred = [cv2.GaussianBlur(img, (0, 0), s, borderType=cv2.BORDER_REFLECT) for s in sigmas]
    resp = np.empty((n_levels,) + img.shape, dtype=np.float32)
    for i, (L, s) in enumerate(zip(blurred, sigmas)):
        lxx = cv2.filter2D(L, -1, _KXX, borderType=cv2.BORDER_REFLECT)
        lyy = cv2.filter2D(L, -1, _KYY, borderType=cv2.BORDER_REFLECT)
        lxy = cv2.filter2D(L, -1, _KXY, borderType=cv2.BORDER_REFLECT)
        resp[i] = (s**4) * (lxx * lyy - lxy * lxy)
    return sigmas, blurred, resp


def _refine(resp: np.ndarray, s: np.ndarray, y: np.ndarray, x: np.ndarray):
    """Quadratic interpolation of the response around integer maxima."""
    def at(ds, dy, dx):
        return resp[s + ds, y + dy, x + dx].astype(np.float64)

    c = at(0, 0, 0)
    g = np.stack([(at(1, 0, 0) - at(-1, 0, 0)) / 2, (at(0, 1, 0) - at(0, -1, 0)) / 2,
                  (at(0, 0, 1) - at(0, 0, -1)) / 2], axis=-1)
    hss = at(1, 0, 0) - 2 * c + at(-1, 0, 0)
    hyy = at(0, 1, 0) - 2 * c + at(0, -1, 0)
    hxx = at(0, 0, 1) - 2 * c + at(0, 0, -1)
    hsy = (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0)) / 4
    hsx = (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1)) / 4
    hyx = (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1)) / 4
    H = np.stack([np.stack([hss, hsy, hsx], -1), np.stack([hsy, hyy, hyx], -1),
                  np.stack([hsx, hyx, hxx], -1)], axis=-2)
    off = np.zeros_like(g)
    det = np.linalg.det(H)
    ok = np.abs(det) > 1e-20
    off[ok] = -np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
    off = np.clip(off, -0.5, 0.5)
    value = c + 0.5 * np.einsum("ij,ij->i", g, off)
    return off, value


def _sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    shape = xs.shape
    n = xs.size
    width = 1024
    pad = (-n) % width
    mx = np.pad(xs.ravel().astype(np.float32), (0, pad)).reshape(-1, width)
    my = np.pad(ys.ravel().astype(np.float32), (0, pad)).reshape(-1, width)
    out = cv2.remap(img, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    return out.ravel()[:n].reshape(shape)


_ORI_OFFSETS = np.array([(i, j) for i in range(-6, 7) for j in range(-6, 7) if i * i + j * j <= 36], dtype=float)
_g = (np.arange(20) - 9.5)
_DESC_GRID = np.stack(np.meshgrid(_g, _g, indexing="xy"), axis=-1).reshape(-1, 2)  # (400, 2) as (x, y)
_DESC_WEIGHT = np.exp(-(_DESC_GRID**2).sum(1) / (2 * 3.3**2))
_DESC_CELL = ((_DESC_GRID[:, 1] + 10) // 5).astype(int) * 4 + ((_DESC_GRID[:, 0] + 10) // 5).astype(int)


def _orientations(gx: np.ndarray, gy: np.ndarray, pos: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    xs = pos[:, None, 0] + _ORI_OFFSETS[None, :, 0] * sigma[:, None]
    ys = pos[:, None, 1] + _ORI_OFFSETS[None, :, 1] * sigma[:, None]
    w = np.exp(-(_ORI_OFFSETS**2).sum(1) / (2 * 2.5**2))[None, :]
    dx = _sample(gx, xs, ys) * w
    dy = _sample(gy, xs, ys) * w
    ang = np.arctan2(dy, dx)
    bins = (np.floor((ang + np.pi) / (2 * np.pi) * 36).astype(int)) % 36
    hx = np.zeros((len(pos), 36))
    hy = np.zeros((len(pos), 36))
    rows = np.repeat(np.arange(len(pos)), dx.shape[1])
    np.add.at(hx, (rows, bins.ravel()), dx.ravel())
    np.add.at(hy, (rows, bins.ravel()), dy.ravel())
    # sliding pi/3 window (6 bins), circular
    wx = sum(np.roll(hx, -k, axis=1) for k in range(6))
    wy = sum(np.roll(hy, -k, axis=1) for k in range(6))
    best = np.argmax(wx**2 + wy**2, axis=1)
    r = np.arange(len(pos))
    return np.arctan2(wy[r, best], wx[r, best])


def _descriptors(gx, gy, pos, sigma, theta) -> np.ndarray:
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    gxo = _DESC_GRID[None, :, 0] * sigma[:, None]
    gyo = _DESC_GRID[None, :, 1] * sigma[:, None]
    xs = pos[:, None, 0] + c * gxo - s * gyo
    ys = pos[:, None, 1] + s * gxo + c * gyo
    dx = _sample(gx, xs, ys)
    dy = _sample(gy, xs, ys)
    u = (c * dx + s * dy) * _DESC_WEIGHT
    v = (-s * dx + c * dy) * _DESC_WEIGHT
    n = len(pos)
    desc = np.zeros((n, 16, 4))
    onehot = np.zeros((400, 16))
    onehot[np.arange(400), _DESC_CELL] = 1.0
    desc[:, :, 0] = u @ onehot
    desc[:, :, 1] = v @ onehot
    desc[:, :, 2] = np.abs(u) @ onehot
    desc[:, :, 3] = np.abs(v) @ onehot
    desc = desc.reshape(n, 64)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    return desc / np.where(norm > 0, norm, 1.0)


def detect(
    prepared: PreparedImage | np.ndarray,
    max_per_tile: int = 10,
    threshold: float = 2e-4,
    upright: bool = False,
    tile_layout=None,
    image_id: str | None = None,
) -> FeatureSet:
    """Detect Hessian blobs, keep the strongest ``max_per_tile`` per tile, describe them.

    ``prepared`` may be a :class:`PreparedImage` (its equalized raster and tile
    layout are used) or a bare gray raster in 0..255.
    """
    if max_per_tile < 1:
        raise InvalidArgumentError("max_per_tile must be >= 1")
    if isinstance(prepared, PreparedImage):
        raster = prepared.gray_eq
        tile_layout = tile_layout if tile_layout is not None else prepared.tile_layout
        image_id = prepared.id
    else:
        raster = prepared
    img = np.asarray(raster, dtype=np.float32) / 255.0
    h, w = img.shape
    if tile_layout is None:
        tile_layout = [(0, 0, w, h)]
    sigmas, blurred, resp = _scale_space(img)

    peak = ndimage.maximum_filter(resp, size=3, mode="nearest")
    cand = (resp == peak) & (resp > threshold)
    cand[0] = cand[-1] = False
    s_idx, y_idx, x_idx = np.nonzero(cand)
    border = np.ceil(3 * sigmas[s_idx]).astype(int) + 2
    keep = (x_idx >= border) & (x_idx < w - border) & (y_idx >= border) & (y_idx < h - border)
    s_idx, y_idx, x_idx = s_idx[keep], y_idx[keep], x_idx[keep]
    if len(s_idx) == 0:
        return FeatureSet(image_id or "")
    off, value = _refine(resp, s_idx, y_idx, x_idx)
    pos = np.stack([x_idx + off[:, 2], y_idx + off[:, 1]], axis=-1)
    level = s_idx + off[:, 0]
    sigma = SIGMA0 * 2.0 ** (level / LEVELS_PER_OCTAVE)

    # per-tile cap by response
    selected = []
    for x0, y0, x1, y1 in tile_layout:
        inside = np.nonzero((pos[:, 0] >= x0 - 0.5) & (pos[:, 0] < x1 - 0.5)
                            & (pos[:, 1] >= y0 - 0.5) & (pos[:, 1] < y1 - 0.5))[0]
        order = inside[np.lexsort((inside, -value[inside]))]
        selected.extend(order[:max_per_tile].tolist())
    sel = np.array(sorted(set(selected)), dtype=int)
    pos, sigma, value, s_idx = pos[sel], sigma[sel], value[sel], s_idx[sel]

    theta = np.zeros(len(pos))
    desc = np.zeros((len(pos), 64))
    for lev in np.unique(s_idx):
        m = s_idx == lev
        gx = cv2.filter2D(blurred[lev], -1, _KX, borderType=cv2.BORDER_REFLECT)
        gy = cv2.filter2D(blurred[lev], -1, _KY, borderType=cv2.BORDER_REFLECT)
        if not upright:
            theta[m] = _orientations(gx, gy, pos[m], sigma[m])
        desc[m] = _descriptors(gx, gy, pos[m], sigma[m], theta[m])
    return FeatureSet(image_id or "", pos, sigma, theta, desc, value)


# ----------------------------------------------------------------------------- matching
def _descs(x) -> np.ndarray:
    if isinstance(x, FeatureSet):
        return x.descriptors
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Feature):
        return np.array([f.descriptor for f in x])
    return np.asarray(x, dtype=float).reshape(-1, 64) if np.size(x) else np.zeros((0, 64))


def match_pair(a, b, ratio: float = 0.8) -> np.ndarray:
    """Mutual-best descriptor matches passing the best/second-best ratio test.

    Returns an (M, 2) int array of (index in a, index in b).
    """
    if not 0 < ratio < 1:
        raise InvalidArgumentError(f"ratio must be in (0, 1), got {ratio}")
    da, db = _descs(a), _descs(b)
    if len(da) == 0 or len(db) == 0:
        return np.zeros((0, 2), dtype=int)
    eps_b = 0.0 if len(db) < EXACT_NN_LIMIT else 0.1
    eps_a = 0.0 if len(da) < EXACT_NN_LIMIT else 0.1
    tree_b = cKDTree(db)
    tree_a = cKDTree(da)
    back_d, back_i = tree_a.query(db, k=1, eps=eps_a)
    if len(db) == 1:
        dist, idx = tree_b.query(da, k=1, eps=eps_b)
        ok = dist < SINGLE_CANDIDATE_MAX_DISTANCE
    else:
        dist, idx = tree_b.query(da, k=2, eps=eps_b)
        ok = dist[:, 0] < ratio * dist[:, 1]
        idx = idx[:, 0]
    ia = np.nonzero(ok)[0]
    ib = idx[ia]
    mutual = back_i[ib] == ia
    return np.stack([ia[mutual], ib[mutual]], axis=-1).astype(int)


# ----------------------------------------------------------------------------- geometry
def _normalize(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return np.c_[pts, np.ones(len(pts))] @ T.T, T


def fundamental_8point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalized linear 8-point estimate with rank-2 enforcement (x2^T F x1 = 0)."""
    p1, T1 = _normalize(x1)
    p2, T2 = _normalize(x2)
    A = np.einsum("ni,nj->nij", p2, p1).reshape(len(p1), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    return F / np.linalg.norm(F)


def homography_dlt(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    p1, T1 = _normalize(x1)
    p2, T2 = _normalize(x2)
    n = len(p1)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = p1
    A[0::2, 6:9] = -p2[:, 0:1] * p1
    A[1::2, 3:6] = p1
    A[1::2, 6:9] = -p2[:, 1:2] * p1
    _, _, Vt = np.linalg.svd(A)
    H = np.linalg.inv(T2) @ Vt[-1].reshape(3, 3) @ T1
    return H / H[2, 2] if abs(H[2, 2]) > 1e-15 else H


def epipolar_distance(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Symmetric point-to-epipolar-line distance in pixels."""
    h1 = np.c_[x1, np.ones(len(x1))]
    h2 = np.c_[x2, np.ones(len(x2))]
    l2 = h1 @ F.T
    l1 = h2 @ F
    num = np.abs(np.einsum("ij,ij->i", h2, l2))
    d2 = num / np.maximum(np.hypot(l2[:, 0], l2[:, 1]), 1e-300)
    d1 = num / np.maximum(np.hypot(l1[:, 0], l1[:, 1]), 1e-300)
    return np.sqrt(0.5 * (d1**2 + d2**2))


def transfer_distance(H: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    def apply(M, x):
        p = np.c_[x, np.ones(len(x))] @ M.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return p[:, :2] / p[:, 2:3]

    try:
        Hi = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(x1), np.inf)
    e = 0.5 * (((apply(H, x1) - x2) ** 2).sum(1) + ((apply(Hi, x2) - x1) ** 2).sum(1))
    return np.sqrt(np.nan_to_num(e, nan=np.inf))


def _ransac(x1, x2, fit, error, sample_size, threshold, rng, max_iter, confidence=0.999):
    n = len(x1)
    best = np.zeros(n, dtype=bool)
    best_err = np.inf
    it, needed = 0, max_iter
    while it < min(needed, max_iter):
        it += 1
        idx = rng.choice(n, sample_size, replace=False)
        try:
            M = fit(x1[idx], x2[idx])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(M)):
            continue
        err = error(M, x1, x2)
        inl = err < threshold
        cnt = inl.sum()
        score = np.minimum(err, threshold).sum()
        if cnt > best.sum() or (cnt == best.sum() and score < best_err):
            best, best_err = inl, score
            w = cnt / n
            if w >= 1:
                needed = 0
            elif w > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w**sample_size)))
    if best.sum() < sample_size:
        return None, best
    # local refinement on the consensus set
    M = None
    for _ in range(3):
        M = fit(x1[best], x2[best])
        new = error(M, x1, x2) < threshold
        if new.sum() < sample_size or np.array_equal(new, best):
            break
        best = new
    return M, best


@dataclass
class GeometricFilterResult:
    matches: np.ndarray
    inlier_mask: np.ndarray
    model: str  # "fundamental" or "homography"
    matrix: np.ndarray


def filter_geometric(
    matches: np.ndarray,
    a_positions: np.ndarray,
    b_positions: np.ndarray,
    inlier_threshold: float = 1.0,
    seed: int = 0,
    max_iter: int = 2000,
    planar_ratio: float = 0.9,
) -> GeometricFilterResult:
    """Robust epipolar filtering with a homography fallback for planar or rotation-only pairs."""
    matches = np.asarray(matches, dtype=int).reshape(-1, 2)
    if len(matches) < 8:
        raise InsufficientMatchesError(f"{len(matches)} matches, at least 8 required")
    x1 = np.asarray(a_positions, float)[matches[:, 0]]
    x2 = np.asarray(b_positions, float)[matches[:, 1]]
    rng = np.random.default_rng(seed)
    H, h_in = _ransac(x1, x2, homography_dlt, transfer_distance, 4, inlier_threshold, rng, max_iter)
    F, f_in = _ransac(x1, x2, fundamental_8point, epipolar_distance, 8, inlier_threshold, rng, max_iter)
    if H is not None and (F is None or h_in.sum() >= planar_ratio * f_in.sum()):
        return GeometricFilterResult(matches[h_in], h_in, "homography", H)
    if F is None:
        return GeometricFilterResult(matches[:0], np.zeros(len(matches), bool), "fundamental", np.zeros((3, 3)))
    return GeometricFilterResult(matches[f_in], f_in, "fundamental", F)


# ----------------------------------------------------------------------------- tracks
class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        while p != self.parent[p]:
            self.parent[p] = self.parent[self.parent[p]]
            p = self.parent[p]
        self.parent[x] = p
        return p

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_tracks(
    pair_matches: dict[tuple[str, str], np.ndarray],
    positions: dict[str, np.ndarray],
    tripods: dict[str, int],
    min_track_length: int = 2,
) -> list[FeatureTrack]:
    """Transitive closure of pairwise matches into tracks.

    Tracks with two features in one image are dropped, as are tracks seen
    from one tripod only and tracks with fewer than ``min_track_length``
    images.
    """
    uf = _UnionFind()
    for (ia, ib), m in sorted(pair_matches.items()):
        for fa, fb in np.asarray(m, dtype=int).reshape(-1, 2):
            uf.union((ia, int(fa)), (ib, int(fb)))
    groups: dict = {}
    for node in sorted(uf.parent):
        groups.setdefault(uf.find(node), []).append(node)

    tracks = []
    for root in sorted(groups):
        nodes = groups[root]
        images = [iid for iid, _ in nodes]
        if len(set(images)) != len(images):
            continue
        tr = [tripods[iid] for iid in images]
        if 0 not in tr or 1 not in tr or len(nodes) < max(2, min_track_length):
            continue
        obs = [(iid, np.asarray(positions[iid][fi], float)) for iid, fi in nodes]
        tracks.append(FeatureTrack(len(tracks), obs, tr, list(nodes)))
    return tracks


def dump_features(features: FeatureSet) -> str:
    return "".join(
        f"{features.image_id} {p[0]:.3f} {p[1]:.3f} {s:.3f} {r:.6g}\n"
        for p, s, r in zip(features.positions, features.scales, features.responses)
    )


def dump_matches(image_a: str, image_b: str, matches: np.ndarray) -> str:
    return "".join(f"{image_a} {image_b} {i} {j}\n" for i, j in np.asarray(matches).reshape(-1, 2))
