"""Circular signalized target detection, localization and cross-image grouping."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from skimage.feature import canny
from skimage.measure import find_contours
from skimage.transform import hough_circle, hough_circle_peaks

from .errors import DegenerateGeometryError, InvalidArgumentError
from .geometry import CameraIntrinsics, CameraPose, project_points, triangulate
from .imageprep import PreparedImage


@dataclass(frozen=True)
class TargetConfig:
    diameter: float = 0.15  # m
    distance_range: tuple[float, float] = (2.0, 10.0)  # m
    circularity_tolerance: float = 0.85
    bright_on_dark: bool = True
    threshold_window: int = 41
    threshold_offset: float = 25.0  # gray levels above the local mean
    min_contrast: float = 40.0
    hough_min_score: float = 0.45
    border_margin: int = 2
    surround_ratio: float = 0.5  # max surround level as a fraction of the disk level

    def radius_range(self, focal_px: float, unit_scale: float = 1.0) -> tuple[float, float]:
        """Expected image radius range in pixels for the configured diameter and distances."""
        lo, hi = self.distance_range
        r = 0.5 * self.diameter * unit_scale
        return focal_px * r / hi, focal_px * r / lo


@dataclass
class TargetObservation:
    image_id: str
    center: np.ndarray
    radius: float
    circularity: float
    score: float


@dataclass
class LocalTarget:
    local_point: np.ndarray
    observations: list[TargetObservation]
    residual: float
    target_id: str | None = None


def _circularity(roi: np.ndarray, level: float, cx: float, cy: float) -> tuple[float, float, float]:
    """Isoperimetric ratio of the innermost iso-contour enclosing (cx, cy); also area and perimeter."""
    best = (0.0, np.inf, 0.0)
    for c in find_contours(roi, level):
        if len(c) < 8 or np.any(c[0] != c[-1]):
            continue
        y, x = c[:, 0], c[:, 1]
        area = 0.5 * abs(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))
        per = np.hypot(np.diff(x), np.diff(y)).sum()
        if per <= 0:
            continue
        # point-in-polygon for the candidate center
        inside = False
        for i in range(len(x) - 1):
            if (y[i] > cy) != (y[i + 1] > cy):
                xi = x[i] + (cy - y[i]) * (x[i + 1] - x[i]) / (y[i + 1] - y[i])
                if xi > cx:
                    inside = not inside
        if inside and area < best[1]:
            best = (min(1.0, 4 * np.pi * area / per**2), area, per)
    return best if np.isfinite(best[1]) else (0.0, 0.0, 0.0)


def detect_targets(prepared: PreparedImage | np.ndarray, config: TargetConfig | None = None,
                   focal_px: float | None = None, image_id: str | None = None) -> list[TargetObservation]:
    """Bright disks on a darker surround, localized to subpixel accuracy.

    Stages: local mean threshold, morphological open/close, connected
    components, circle Hough voting over the expected radius range,
    circularity check on a subpixel iso-contour, intensity-weighted centroid.
    """
    cfg = config or TargetConfig()
    if isinstance(prepared, PreparedImage):
        gray = prepared.gray
        focal_px = prepared.intrinsics.focal_length if focal_px is None else focal_px
        image_id = prepared.id
    else:
        gray = np.asarray(prepared, dtype=np.float32)
        if gray.ndim == 3:
            gray = gray[..., 0] * 0.299 + gray[..., 1] * 0.587 + gray[..., 2] * 0.114
    if focal_px is None:
        raise InvalidArgumentError("focal length is required for the radius range")
    gray = gray.astype(np.float32)
    if not cfg.bright_on_dark:
        gray = 255.0 - gray
    r_min, r_max = cfg.radius_range(focal_px)
    h, w = gray.shape

    local_mean = cv2.blur(gray, (cfg.threshold_window, cfg.threshold_window), borderType=cv2.BORDER_REFLECT)
    binary = (gray > local_mean + cfg.threshold_offset).astype(np.uint8)
    kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (3, 3))
    binary = cv2.morphologyEx(binary, cv2.MORPH_OPEN, kernel)
    binary = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)
    n, labels, stats, cents = cv2.connectedComponentsWithStats(binary, connectivity=8)

    out = []
    radii = np.arange(max(2, int(np.floor(r_min))), int(np.ceil(r_max)) + 1)
    for lab in range(1, n):
        x, y, bw, bh, area = stats[lab]
        r_eq = np.sqrt(area / np.pi)
        if not (0.7 * r_min <= r_eq <= 1.3 * r_max):
            continue
        pad = int(np.ceil(0.8 * r_eq)) + 3
        x0, y0 = max(0, x - pad), max(0, y - pad)
        x1, y1 = min(w, x + bw + pad), min(h, y + bh + pad)
        if x0 < cfg.border_margin or y0 < cfg.border_margin or x1 > w - cfg.border_margin or y1 > h - cfg.border_margin:
            continue
        roi = gray[y0:y1, x0:x1]
        mask = labels[y0:y1, x0:x1] == lab
        bright = float(np.median(roi[mask]))
        ring = roi[~mask]
        dark = float(np.percentile(ring, 10)) if ring.size else 0.0
        if bright - dark < cfg.min_contrast:
            continue

        edges = canny(roi.astype(float), sigma=1.0)
        rr = radii[(radii >= 0.7 * r_eq) & (radii <= 1.3 * r_eq + 1)]
        if len(rr) == 0 or not edges.any():
            continue
        acc = hough_circle(edges, rr)  # normalized by circle perimeter
        _, hx, hy, hr = hough_circle_peaks(acc, rr, total_num_peaks=1)
        if len(hx) == 0:
            continue
        score = float(acc[list(rr).index(hr[0]), hy[0], hx[0]])
        if score < cfg.hough_min_score:
            continue
        level = 0.5 * (bright + dark)
        circ, c_area, _ = _circularity(roi, level, float(hx[0]), float(hy[0]))
        if circ < cfg.circularity_tolerance:
            continue
        radius = float(np.sqrt(c_area / np.pi))
        if not (r_min <= radius <= r_max):
            continue

        # the dark surround distinguishes targets from bright texture speckles
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(float)
        cx0, cy0 = x0 + hx[0], y0 + hy[0]
        dist = np.hypot(xx - cx0, yy - cy0)
        annulus = roi[(dist >= 1.1 * radius) & (dist <= 1.3 * radius)]
        if annulus.size == 0:
            continue
        surround = float(np.median(annulus))
        if bright - surround < cfg.min_contrast or surround > cfg.surround_ratio * bright:
            continue

        # centroid of fractional coverage inside the slightly grown blob
        grown = cv2.dilate(mask.astype(np.uint8), cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (5, 5))) > 0
        wgt = np.clip((roi - dark) / (bright - dark), 0, 1) * grown
        if wgt.sum() <= 0:
            continue
        cx = float((wgt * xx).sum() / wgt.sum())
        cy = float((wgt * yy).sum() / wgt.sum())
        if np.hypot(cx - cx0, cy - cy0) > 0.5 * radius:
            continue
        out.append(TargetObservation(image_id or "", np.array([cx, cy]), radius, float(circ), score))
    out.sort(key=lambda t: (t.center[1], t.center[0]))
    return out


# ----------------------------------------------------------------------------- correspondence
def _fundamental(p0: CameraPose, p1: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    R = p1.rotation @ p0.rotation.T
    t = p1.rotation @ (p0.center - p1.center)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Kinv = np.linalg.inv(intr.K)
    return Kinv.T @ tx @ R @ Kinv


def _pair_distance(o0, o1, p0, p1, intr) -> float:
    """Epipolar distance, or transfer distance when both views share a center."""
    x0 = np.append(o0.center, 1.0)
    x1 = np.append(o1.center, 1.0)
    if np.linalg.norm(p0.center - p1.center) < 1e-9:
        H = intr.K @ p1.rotation @ p0.rotation.T @ np.linalg.inv(intr.K)
        y = H @ x0
        return float(np.hypot(*(y[:2] / y[2] - o1.center))) if y[2] > 0 else np.inf
    F = _fundamental(p0, p1, intr)
    l1 = F @ x0
    l0 = F.T @ x1
    num = abs(x1 @ F @ x0)
    return float(max(num / np.hypot(l1[0], l1[1]), num / np.hypot(l0[0], l0[1])))


def correspond_targets(
    detections: dict[str, list[TargetObservation]],
    poses: dict[str, CameraPose],
    intr: CameraIntrinsics,
    epipolar_threshold: float = 2.0,
    max_residual: float = 1.0,
    merge_distance: float = 0.05,
) -> list[LocalTarget]:
    """Group detections of the same physical target and triangulate them.

    Seeds are cross-base detection pairs that are epipolar-consistent;
    their 3D points are clustered.  A detection that lands in two clusters
    is ambiguous and removed from both.
    """
    flat = [(iid, k, o) for iid in sorted(detections) for k, o in enumerate(detections[iid]) if iid in poses]
    seeds = []
    for a in range(len(flat)):
        for b in range(a + 1, len(flat)):
            ia, _, oa = flat[a]
            ib, _, ob = flat[b]
            if ia == ib:
                continue
            pa, pb = poses[ia], poses[ib]
            if np.linalg.norm(pa.center - pb.center) < 1e-9:
                continue
            if _pair_distance(oa, ob, pa, pb, intr) > epipolar_threshold:
                continue
            try:
                tri = triangulate([(pa, intr, oa.center), (pb, intr, ob.center)])
            except DegenerateGeometryError:
                continue
            if tri.rms < max_residual:
                seeds.append((tri.point, {a, b}))

    # greedy clustering of seed points
    clusters: list[tuple[list[np.ndarray], set]] = []
    for pt, members in seeds:
        for pts, mem in clusters:
            if np.linalg.norm(np.mean(pts, axis=0) - pt) < merge_distance:
                pts.append(pt)
                mem |= members
                break
        else:
            clusters.append(([pt], set(members)))

    # also attach same-center detections consistent with a cluster's point
    for pts, mem in clusters:
        X = np.mean(pts, axis=0)
        for i, (iid, _, o) in enumerate(flat):
            if i in mem:
                continue
            uv = project_points(X[None], poses[iid], intr)[0]
            if np.all(np.isfinite(uv)) and np.hypot(*(uv - o.center)) < epipolar_threshold:
                mem.add(i)

    count: dict[int, int] = {}
    for _, mem in clusters:
        for i in mem:
            count[i] = count.get(i, 0) + 1
    out = []
    for _, mem in clusters:
        members = sorted(i for i in mem if count[i] == 1)
        by_image: dict[str, list[int]] = {}
        for i in members:
            by_image.setdefault(flat[i][0], []).append(i)
        members = [v[0] for v in by_image.values() if len(v) == 1]
        if len(members) < 2:
            continue
        obs = [flat[i][2] for i in sorted(members)]
        centers = {poses[o.image_id].center.tobytes() for o in obs}
        if len(centers) < 2:
            continue
        try:
            tri = triangulate([(poses[o.image_id], intr, o.center) for o in obs])
        except DegenerateGeometryError:
            continue
        if tri.rms >= max_residual:
            continue
        out.append(LocalTarget(tri.point, obs, tri.rms))
    out.sort(key=lambda t: tuple(np.round(t.local_point, 9)))
    return out
