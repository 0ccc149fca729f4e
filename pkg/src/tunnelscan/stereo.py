"""Dense correspondence for stereo pairs across the two tripod positions.

Pairs are rectified so epipolar lines are image rows, the search window
around the tie-point prediction is scored with RGB normalized cross
correlation, refined with a windowed gradient step and cross-checked in
both directions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from .errors import InsufficientMatchesError, InvalidArgumentError
from .geometry import CameraIntrinsics, CameraPose, apply_distortion
from .imageprep import VIGNETTE_GAIN_BOUNDS, PreparedImage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StereoConfig:
    window: int = 15
    margin: int = 4  # px around the predicted disparity
    min_ncc: float = 0.6
    lr_tolerance: float = 1.0
    refine_iterations: int = 4
    curvature_scale: float = 0.5
    min_seeds: int = 5
    min_overlap: float = 0.3


@dataclass
class Rectification:
    K: np.ndarray
    R: np.ndarray  # shared world-to-rectified rotation
    centers: tuple[np.ndarray, np.ndarray]
    H: tuple[np.ndarray, np.ndarray]  # ideal image pixels -> rectified pixels
    size: tuple[int, int]  # (width, height)

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.centers[1] - self.centers[0]))

    def to_rectified(self, which: int, uv: np.ndarray) -> np.ndarray:
        p = np.c_[np.asarray(uv, float).reshape(-1, 2), np.ones(len(np.asarray(uv).reshape(-1, 2)))] @ self.H[which].T
        return p[:, :2] / p[:, 2:3]

    def from_rectified(self, which: int, q: np.ndarray) -> np.ndarray:
        Hi = np.linalg.inv(self.H[which])
        q = np.asarray(q, float).reshape(-1, 2)
        p = np.c_[q, np.ones(len(q))] @ Hi.T
        return p[:, :2] / p[:, 2:3]

    def project(self, which: int, X: np.ndarray) -> np.ndarray:
        pc = (np.asarray(X, float).reshape(-1, 3) - self.centers[which]) @ self.R.T
        p = pc @ self.K.T
        return p[:, :2] / p[:, 2:3]

    def triangulate(self, x: np.ndarray, y: np.ndarray, d: np.ndarray) -> np.ndarray:
        """World points from reference-rectified pixels and disparities (``x_match = x - d``)."""
        f = self.K[0, 0]
        z = f * self.baseline / d
        rays = np.stack([(x - self.K[0, 2]) / f, (y - self.K[1, 2]) / f, np.ones_like(x)], axis=-1)
        return self.centers[0] + (z[..., None] * rays) @ self.R


@dataclass
class DisparityMap:
    pair_id: tuple[str, str]
    disparity: np.ndarray  # (h, w, 2) offset from reference to match pixel in the rectified frame; NaN invalid
    confidence: np.ndarray  # (h, w) in [0, 1], 0 where invalid
    rectification: Rectification
    reference_rgb: np.ndarray = field(repr=False, default=None)  # rectified reference colors

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.disparity[..., 0])

    @property
    def scalar(self) -> np.ndarray:
        """Positive disparity ``x_ref - x_match``; NaN where invalid."""
        return -self.disparity[..., 0]


# ----------------------------------------------------------------------------- pairs
def _overlap(pa: CameraPose, pb: CameraPose, intr: CameraIntrinsics, depth: float, n: int = 16) -> float:
    w, h = intr.sensor_size
    u, v = np.meshgrid(np.linspace(0, w - 1, n), np.linspace(0, h - 1, n))
    f = intr.focal_length
    cx, cy = intr.principal_point
    rays = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u)], axis=-1).reshape(-1, 3)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    X = pa.center + depth * rays @ pa.rotation
    pc = (X - pb.center) @ pb.rotation.T
    ok = pc[:, 2] > 0
    uu = f * pc[:, 0] / np.where(ok, pc[:, 2], 1) + cx
    vv = f * pc[:, 1] / np.where(ok, pc[:, 2], 1) + cy
    inside = ok & (uu >= 0) & (uu <= w - 1) & (vv >= 0) & (vv <= h - 1)
    return float(inside.mean())


def select_pairs(images: list[tuple[str, int]], poses: dict[str, CameraPose], intr: CameraIntrinsics,
                 depth: float, min_overlap: float = 0.3) -> list[tuple[str, str]]:
    """For each tripod-0 image, the tripod-1 image with the largest frustum overlap at ``depth``."""
    t0 = [iid for iid, t in images if t == 0]
    t1 = [iid for iid, t in images if t == 1]
    pairs = []
    for a in t0:
        scores = [(_overlap(poses[a], poses[b], intr, depth), b) for b in t1]
        if not scores:
            continue
        best, b = max(scores, key=lambda s: (s[0], s[1]))
        if best >= min_overlap:
            pairs.append((a, b))
        else:
            log.warning("coverage gap: no stereo partner for %s (best overlap %.2f)", a, best)
    return pairs


# ----------------------------------------------------------------------------- rectification
def rectify(pose0: CameraPose, pose1: CameraPose, intr: CameraIntrinsics) -> Rectification:
    base = pose1.center - pose0.center
    if np.linalg.norm(base) < 1e-9:
        raise InvalidArgumentError("stereo pair has no baseline")
    x = base / np.linalg.norm(base)
    z_old = pose0.rotation[2] + pose1.rotation[2]
    y = np.cross(z_old, x)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    R = np.stack([x, y, z])
    Kinv = np.linalg.inv(intr.K)
    w, h = intr.sensor_size
    f = intr.focal_length
    M0 = R @ pose0.rotation.T @ Kinv
    corners = np.array([[0, 0, 1], [w - 1, 0, 1], [0, h - 1, 1], [w - 1, h - 1, 1]], float)
    q = corners @ M0.T
    q = q[:, :2] / q[:, 2:3] * f
    lo, hi = np.floor(q.min(0)), np.ceil(q.max(0))
    K = np.array([[f, 0, -lo[0]], [0, f, -lo[1]], [0, 0, 1]])
    size = (int(hi[0] - lo[0]) + 1, int(hi[1] - lo[1]) + 1)
    H0 = K @ M0
    H1 = K @ R @ pose1.rotation.T @ Kinv
    return Rectification(K, R, (pose0.center.copy(), pose1.center.copy()), (H0, H1), size)


def _warp_to_rectified(img: PreparedImage, H: np.ndarray, size) -> tuple[np.ndarray, np.ndarray]:
    """Resample straight from the raw raster (one cubic interpolation); returns RGB and coverage mask."""
    w, h = size
    q = np.stack(np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float)), axis=-1).reshape(-1, 2)
    p = np.c_[q, np.ones(len(q))] @ np.linalg.inv(H).T
    ideal = (p[:, :2] / p[:, 2:3]).reshape(h, w, 2)
    if img.source is not None and img.source_intrinsics is not None:
        src, intr = img.source.astype(np.float32), img.source_intrinsics
        raw = apply_distortion(ideal, intr) if intr.has_distortion else ideal
    else:
        src, intr = img.rgb.astype(np.float32), None
        raw = ideal
    mx, my = raw[..., 0].astype(np.float32), raw[..., 1].astype(np.float32)
    out = cv2.remap(src, mx, my, cv2.INTER_CUBIC, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    sh, sw = src.shape[:2]
    inside = (mx >= 1) & (mx <= sw - 2) & (my >= 1) & (my <= sh - 2)
    if intr is not None and any(intr.vignette_coeffs):
        gain = np.clip(intr.vignette_gain(raw[..., 0], raw[..., 1]), *VIGNETTE_GAIN_BOUNDS).astype(np.float32)
        out = out / gain[..., None]
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    return out, inside


# ----------------------------------------------------------------------------- matching
class _Window:
    def __init__(self, size: int):
        self.k = (size, size)

    def __call__(self, a):
        return cv2.boxFilter(a, -1, self.k, normalize=True, borderType=cv2.BORDER_REFLECT)


def _shift(img, x_src, y):
    return cv2.remap(img, x_src.astype(np.float32), y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def _ncc(L, Lmu, Lsd, W, box):
    Wmu = box(W)
    Wsd = np.sqrt(np.maximum(box(W * W) - Wmu * Wmu, 0))
    cov = box(L * W) - Lmu * Wmu
    ncc = cov / np.maximum(Lsd * Wsd, 1e-3)
    return ncc.mean(axis=2)


def _match_direction(L, M, mask_l, mask_m, pred, cfg: StereoConfig, sign: float):
    """Disparity field ``d`` with ``x_match = x + sign * d``.  Returns (d, score, curvature)."""
    h, w = L.shape[:2]
    box = _Window(cfg.window)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    Lmu = box(L)
    Lsd = np.sqrt(np.maximum(box(L * L) - Lmu * Lmu, 0))
    offsets = np.arange(-cfg.margin, cfg.margin + 1)
    scores = np.empty((len(offsets), h, w), np.float32)
    for k, o in enumerate(offsets):
        W = _shift(M, xs + sign * (pred + o), ys)
        scores[k] = _ncc(L, Lmu, Lsd, W, box)
    best = np.argmax(scores, axis=0)
    s0 = np.take_along_axis(scores, best[None], 0)[0]
    interior = (best > 0) & (best < len(offsets) - 1)
    bm = np.clip(best - 1, 0, len(offsets) - 1)
    bp = np.clip(best + 1, 0, len(offsets) - 1)
    sm = np.take_along_axis(scores, bm[None], 0)[0]
    sp = np.take_along_axis(scores, bp[None], 0)[0]
    curv = 2 * s0 - sm - sp
    delta = np.where(curv > 1e-6, 0.5 * (sp - sm) / np.maximum(curv, 1e-6), 0.0)
    d = pred + offsets[best] + np.clip(delta, -0.5, 0.5)

    # windowed gradient refinement with an affine disparity model inside the window;
    # each neighbour's residual is carried back to the centre pixel's model
    gx = cv2.Sobel(M, cv2.CV_32F, 1, 0, ksize=1, scale=0.5, borderType=cv2.BORDER_REFLECT)
    Lz = L - Lmu
    d0 = d.copy()
    half = cfg.window // 2
    r = np.arange(-half, half + 1, dtype=np.float32)
    kern = {(i, j): np.outer(r**j, r**i) / cfg.window**2 for i in range(3) for j in range(3) if i + j <= 2}

    def wsum(a, i, j):
        return cv2.filter2D(a, -1, kern[(i, j)], borderType=cv2.BORDER_REFLECT)

    for _ in range(cfg.refine_iterations):
        xm = xs + sign * d
        W = cv2.remap(M, xm.astype(np.float32), ys, cv2.INTER_CUBIC, borderMode=cv2.BORDER_REFLECT)
        G = cv2.remap(gx, xm.astype(np.float32), ys, cv2.INTER_CUBIC, borderMode=cv2.BORDER_REFLECT)
        Wz = W - box(W)
        Gz = G - box(G)
        g2 = (Gz * Gz).sum(axis=2)
        rhs = g2 * d + sign * (Gz * (Lz - Wz)).sum(axis=2)
        A = np.empty((h, w, 3, 3), np.float64)
        b = np.empty((h, w, 3), np.float64)
        mono = [(0, 0), (1, 0), (0, 1)]
        for p_, (i1, j1) in enumerate(mono):
            b[..., p_] = wsum(rhs, i1, j1)
            for q_, (i2, j2) in enumerate(mono[p_:], p_):
                A[..., p_, q_] = A[..., q_, p_] = wsum(g2, i1 + i2, j1 + j2)
        A[..., 1, 1] += 1e-6 * A[..., 0, 0]
        A[..., 2, 2] += 1e-6 * A[..., 0, 0]
        ok_a = A[..., 0, 0] > 1e-6
        A[~ok_a] = np.eye(3)
        b[~ok_a] = 0.0
        sol = np.linalg.solve(A, b[..., None])[..., 0]
        target = np.where(ok_a, sol[..., 0], d)
        d = (d + np.clip(target - d, -0.5, 0.5)).astype(np.float32)
    moved = np.abs(d - d0) > 1.0

    # the whole correlation window must lie on valid pixels in both views
    full = np.ones((cfg.window, cfg.window), np.uint8)
    mask_l = cv2.erode(mask_l.astype(np.uint8), full, borderValue=0) > 0
    mask_m = cv2.erode(mask_m.astype(np.uint8), full, borderValue=0) > 0
    xm = xs + sign * d
    ok = interior & (s0 >= cfg.min_ncc) & ~moved & mask_l
    inside_m = (xm >= 0) & (xm <= w - 1)
    mi = cv2.remap(mask_m.astype(np.float32), xm.astype(np.float32), ys, cv2.INTER_NEAREST,
                   borderMode=cv2.BORDER_CONSTANT, borderValue=0) > 0.5
    ok &= inside_m & mi
    ok[:half] = ok[-half:] = False
    ok[:, :half] = ok[:, -half:] = False
    return np.where(ok, d, np.nan), s0, curv


def seed_disparities(rect: Rectification, points: np.ndarray) -> np.ndarray:
    """(x, y, d) in the reference-rectified frame for 3D tie-points."""
    q0 = rect.project(0, points)
    q1 = rect.project(1, points)
    d = q0[:, 0] - q1[:, 0]
    ok = np.isfinite(d) & (d > 0)
    return np.c_[q0[ok], d[ok]]


def _disparity_trend(seeds: np.ndarray, size):
    """Robust low-order polynomial d(x, y) through the seeds, and the seeds it keeps.

    Disparity of a plane is affine in rectified coordinates and that of a
    smooth wall is close to quadratic, so the trend carries the curvature
    that piecewise-linear interpolation of sparse seeds misses.
    """
    n = len(seeds)
    deg = 2 if n >= 12 else 1 if n >= 6 else 0
    if deg == 0:
        return None, np.ones(n, bool)
    w, h = size

    def design(x, y):
        x, y = np.asarray(x) / w, np.asarray(y) / h
        return np.stack([x**i * y**j for i in range(deg + 1) for j in range(deg + 1 - i)], axis=-1)

    A, d = design(seeds[:, 0], seeds[:, 1]), seeds[:, 2]
    keep = np.ones(n, bool)
    for _ in range(2):
        coef = np.linalg.lstsq(A[keep], d[keep], rcond=None)[0]
        res = np.abs(A @ coef - d)
        keep = res <= max(3 * 1.4826 * np.median(res[keep]), 1.0)
        if keep.sum() < A.shape[1]:
            return None, np.ones(n, bool)
    return (lambda x, y: design(x, y) @ coef), keep


def _predict(seeds: np.ndarray, size) -> np.ndarray:
    """Expected disparity per rectified pixel: trend plus interpolated seed residuals."""
    w, h = size
    step = 8
    gx, gy = np.meshgrid(np.arange(0, w + step, step, dtype=float), np.arange(0, h + step, step, dtype=float))
    trend, keep = _disparity_trend(seeds, size)
    if trend is None:
        lin = LinearNDInterpolator(seeds[:, :2], seeds[:, 2])(gx, gy)
        near = NearestNDInterpolator(seeds[:, :2], seeds[:, 2])(gx, gy)
        coarse = np.where(np.isfinite(lin), lin, near)
    else:
        s = seeds[keep]
        res = LinearNDInterpolator(s[:, :2], s[:, 2] - trend(s[:, 0], s[:, 1]))(gx, gy)
        coarse = trend(gx, gy) + np.nan_to_num(res)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32) / step, np.arange(h, dtype=np.float32) / step)
    return cv2.remap(coarse.astype(np.float32), xs, ys, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def dense_match(
    pair: tuple[str, str],
    ref: PreparedImage,
    match: PreparedImage,
    pose_ref: CameraPose,
    pose_match: CameraPose,
    tie_points: np.ndarray,
    config: StereoConfig | None = None,
) -> DisparityMap:
    """Dense disparity for ``pair`` seeded by the 3D ``tie_points`` seen in both images."""
    cfg = config or StereoConfig()
    intr = ref.intrinsics
    rect = rectify(pose_ref, pose_match, intr)
    seeds = seed_disparities(rect, np.asarray(tie_points, float).reshape(-1, 3))
    w, h = rect.size
    inb = (seeds[:, 0] >= 0) & (seeds[:, 0] <= w - 1) & (seeds[:, 1] >= 0) & (seeds[:, 1] <= h - 1)
    seeds = seeds[inb]
    if len(seeds) < cfg.min_seeds:
        raise InsufficientMatchesError(f"pair {pair}: {len(seeds)} tie-points, {cfg.min_seeds} required for seeding")
    L, mask_l = _warp_to_rectified(ref, rect.H[0], rect.size)
    M, mask_m = _warp_to_rectified(match, rect.H[1], rect.size)
    pred = _predict(seeds, rect.size)

    d_lr, s_lr, curv = _match_direction(L, M, mask_l, mask_m, pred, cfg, -1.0)
    # match-image prediction: reference prediction carried along the rows
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    seeds_m = seeds.copy()
    seeds_m[:, 0] = seeds[:, 0] - seeds[:, 2]
    pred_m = _predict(seeds_m, rect.size)
    d_rl, _, _ = _match_direction(M, L, mask_m, mask_l, pred_m, cfg, +1.0)

    back = cv2.remap(np.nan_to_num(d_rl, nan=-1e6).astype(np.float32), (xs - np.nan_to_num(d_lr)).astype(np.float32),
                     ys, cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=-1e6)
    consistent = np.abs(back - d_lr) < cfg.lr_tolerance
    valid = np.isfinite(d_lr) & consistent
    conf = np.where(valid, np.clip(curv / cfg.curvature_scale, 0, 1) * np.clip(s_lr, 0, 1), 0.0)
    valid &= conf > 0
    disp = np.full((h, w, 2), np.nan)
    disp[valid, 0] = -d_lr[valid]
    disp[valid, 1] = 0.0
    return DisparityMap(pair, disp, np.where(valid, conf, 0.0).astype(np.float64), rect, L)
