"""Camera model, poses, collinearity projection and Brown lens distortion.

Pixel coordinates follow the usual raster convention: the center of pixel
``(col, row)`` sits at ``(u, v) = (col, row)``.  Camera frame is x right,
y down, z forward.  Rotations map world to camera, ``p_cam = R (X - C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateGeometryError,
    InputError,
    InvalidArgumentError,
    NonInvertibleDistortionError,
)

ORTHONORMAL_TOL = 1e-9


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def sweep_rotation(pitch: float) -> np.ndarray:
    """World-to-camera rotation for a camera tilted by ``pitch`` about +X.

    The image x axis stays parallel to world +X (the tilt axis).  Pitch 0
    looks horizontally along +Y, pitch pi/2 looks straight up (+Z).
    """
    c, s = np.cos(pitch), np.sin(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, s, -c], [0.0, c, s]])


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length: float
    principal_point: tuple[float, float]
    sensor_size: tuple[int, int]  # (width, height)
    radial_coeffs: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tangential_coeffs: tuple[float, float] = (0.0, 0.0)
    vignette_coeffs: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.focal_length) or self.focal_length <= 0:
            raise InvalidArgumentError(f"focal length must be positive, got {self.focal_length}")
        w, h = self.sensor_size
        if w <= 0 or h <= 0:
            raise InvalidArgumentError(f"sensor size must be positive, got {self.sensor_size}")
        # monotone radial mapping over the sensor diagonal
        r_max = self.diagonal_radius / self.focal_length
        r = np.linspace(0.0, r_max, 512)
        k1, k2, k3 = self.radial_coeffs
        slope = 1 + 3 * k1 * r**2 + 5 * k2 * r**4 + 7 * k3 * r**6
        if np.any(slope <= 0):
            raise NonInvertibleDistortionError(
                "radial distortion is not monotone over the sensor diagonal"
            )

    @property
    def K(self) -> np.ndarray:
        f = self.focal_length
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    @property
    def diagonal_radius(self) -> float:
        w, h = self.sensor_size
        return 0.5 * float(np.hypot(w, h))

    @property
    def has_distortion(self) -> bool:
        return any(self.radial_coeffs) or any(self.tangential_coeffs)

    def ideal(self) -> "CameraIntrinsics":
        """Same pinhole geometry with distortion and vignetting removed."""
        return replace(
            self,
            radial_coeffs=(0.0, 0.0, 0.0),
            tangential_coeffs=(0.0, 0.0),
            vignette_coeffs=(0.0, 0.0, 0.0, 0.0),
        )

    def scaled(self, factor: float, sensor_size: tuple[int, int] | None = None) -> "CameraIntrinsics":
        """Intrinsics of the image resampled by ``factor``.

        Pixel centers are at integer coordinates, so the principal point
        transforms as ``(c + 0.5) * factor - 0.5``.
        """
        if not 0 < factor <= 1:
            raise InvalidArgumentError(f"scale factor must be in (0, 1], got {factor}")
        if sensor_size is None:
            w, h = self.sensor_size
            sensor_size = (max(1, round(w * factor)), max(1, round(h * factor)))
        cx, cy = self.principal_point
        return replace(
            self,
            focal_length=self.focal_length * factor,
            principal_point=((cx + 0.5) * factor - 0.5, (cy + 0.5) * factor - 0.5),
            sensor_size=tuple(int(s) for s in sensor_size),
        )

    def vignette_gain(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Relative illumination at pixel positions (1 at the principal point)."""
        cx, cy = self.principal_point
        rho2 = ((u - cx) ** 2 + (v - cy) ** 2) / self.diagonal_radius**2
        v1, v2, v3, v4 = self.vignette_coeffs
        return 1.0 + rho2 * (v1 + rho2 * (v2 + rho2 * (v3 + rho2 * v4)))


@dataclass
class CameraPose:
    rotation: np.ndarray
    center: np.ndarray
    fixed_position: bool = False

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=float)
        self.center = np.array(self.center, dtype=float)
        if self.rotation.shape != (3, 3) or self.center.shape != (3,):
            raise InvalidArgumentError("pose needs a 3x3 rotation and a 3-vector center")
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.center))):
            raise InvalidArgumentError("pose contains non-finite values")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL or np.linalg.det(self.rotation) < 0:
            raise InvalidArgumentError(f"rotation is not orthonormal (error {err:.2e})")

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation.T

    def copy(self, **changes) -> "CameraPose":
        kw = dict(rotation=self.rotation.copy(), center=self.center.copy(),
                  fixed_position=self.fixed_position)
        kw.update(changes)
        return CameraPose(**kw)


@dataclass
class ImageRecord:
    id: str
    tripod_index: int
    rotation_index: int
    pixels: np.ndarray = field(repr=False)
    intrinsics_ref: str = "default"

    def __post_init__(self):
        if self.tripod_index not in (0, 1):
            raise InvalidArgumentError(f"tripod index must be 0 or 1, got {self.tripod_index}")


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("non-finite input")


def project_points(points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Ideal collinearity projection of an (N, 3) array; NaN rows for points behind the camera."""
    points = np.asarray(points, dtype=float)
    _check_finite(points)
    pc = pose.to_camera(points.reshape(-1, 3))
    z = pc[:, 2]
    out = np.full((len(pc), 2), np.nan)
    ok = z > 0
    cx, cy = intr.principal_point
    out[ok, 0] = intr.focal_length * pc[ok, 0] / z[ok] + cx
    out[ok, 1] = intr.focal_length * pc[ok, 1] / z[ok] + cy
    return out.reshape(points.shape[:-1] + (2,))


def project(point, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray | None:
    """Project one 3D point; ``None`` when it lies on or behind the image plane."""
    uv = project_points(np.asarray(point, dtype=float).reshape(1, 3), pose, intr)[0]
    return None if np.isnan(uv[0]) else uv


def _distort_normalized(x, y, k, p):
    r2 = x * x + y * y
    radial = 1 + r2 * (k[0] + r2 * (k[1] + r2 * k[2]))
    xd = x * radial + 2 * p[0] * x * y + p[1] * (r2 + 2 * x * x)
    yd = y * radial + p[0] * (r2 + 2 * y * y) + 2 * p[1] * x * y
    return xd, yd


def apply_distortion(ideal, intr: CameraIntrinsics) -> np.ndarray:
    """Map ideal pinhole pixel coordinates to distorted (observed) ones."""
    ideal = np.asarray(ideal, dtype=float)
    _check_finite(ideal)
    if not intr.has_distortion:
        return ideal.copy()
    f = intr.focal_length
    cx, cy = intr.principal_point
    x = (ideal[..., 0] - cx) / f
    y = (ideal[..., 1] - cy) / f
    xd, yd = _distort_normalized(x, y, intr.radial_coeffs, intr.tangential_coeffs)
    return np.stack([xd * f + cx, yd * f + cy], axis=-1)


def remove_distortion(observed, intr: CameraIntrinsics, max_iter: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Invert :func:`apply_distortion` by Newton iteration in normalized coordinates."""
    observed = np.asarray(observed, dtype=float)
    _check_finite(observed)
    if not intr.has_distortion:
        return observed.copy()
    f = intr.focal_length
    cx, cy = intr.principal_point
    xd = (observed[..., 0] - cx) / f
    yd = (observed[..., 1] - cy) / f
    k1, k2, k3 = intr.radial_coeffs
    p1, p2 = intr.tangential_coeffs
    x, y = xd.copy(), yd.copy()
    for _ in range(max_iter):
        fx, fy = _distort_normalized(x, y, intr.radial_coeffs, intr.tangential_coeffs)
        ex, ey = fx - xd, fy - yd
        if np.all(np.abs(ex) < tol) and np.all(np.abs(ey) < tol):
            break
        r2 = x * x + y * y
        radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dradial = 2 * (k1 + r2 * (2 * k2 + 3 * k3 * r2))  # d radial / d(r2) * 2
        a = radial + x * x * dradial + 2 * p1 * y + 6 * p2 * x
        b = x * y * dradial + 2 * p1 * x + 2 * p2 * y
        c = x * y * dradial + 2 * p1 * x + 2 * p2 * y
        d = radial + y * y * dradial + 6 * p1 * y + 2 * p2 * x
        det = a * d - b * c
        if np.any(np.abs(det) < 1e-12):
            raise NonInvertibleDistortionError("distortion Jacobian is singular")
        x = x - (d * ex - b * ey) / det
        y = y - (-c * ex + a * ey) / det
    else:
        raise NonInvertibleDistortionError("distortion inverse did not converge in %d iterations" % max_iter)
    return np.stack([x * f + cx, y * f + cy], axis=-1)


def pixel_rays(uv: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Unit world-frame viewing directions for ideal pixel coordinates."""
    uv = np.asarray(uv, dtype=float)
    cx, cy = intr.principal_point
    d = np.stack(
        [(uv[..., 0] - cx) / intr.focal_length, (uv[..., 1] - cy) / intr.focal_length,
         np.ones(uv.shape[:-1])],
        axis=-1,
    )
    d = d @ pose.rotation  # R^T d
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class Triangulation:
    point: np.ndarray
    rms: float


def triangulate(observations, min_angle_deg: float = 0.05, refine_iters: int = 10) -> Triangulation:
    """Least-squares intersection of viewing rays.

    ``observations`` is a sequence of ``(pose, intrinsics, uv)`` with ideal
    pixel coordinates.  The ray midpoint solution is refined by Gauss-Newton
    on the reprojection error.
    """
    observations = list(observations)
    if len(observations) < 2:
        raise InvalidArgumentError("triangulation needs at least two observations")
    centers = np.array([pose.center for pose, _, _ in observations])
    dirs = np.array([pixel_rays(np.asarray(uv, float), pose, intr) for pose, intr, uv in observations])
    _check_finite(dirs)

    cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
    max_angle = np.degrees(np.arccos(cosines.min()))
    if max_angle < min_angle_deg:
        raise DegenerateGeometryError(
            f"viewing rays are parallel within {max_angle:.4f} deg (< {min_angle_deg} deg)"
        )

    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, dirs):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ c
    X = np.linalg.solve(A, b)

    for _ in range(refine_iters):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        for pose, intr, uv in observations:
            r, J = _reprojection_and_jacobian(X, pose, intr, uv)
            JtJ += J.T @ J
            Jtr += J.T @ r
        step = np.linalg.solve(JtJ, -Jtr)
        X = X + step
        if np.linalg.norm(step) <= 1e-14 * max(1.0, np.linalg.norm(X)):
            break

    res = []
    for pose, intr, uv in observations:
        r, _ = _reprojection_and_jacobian(X, pose, intr, uv)
        res.append(r)
    rms = float(np.sqrt(np.mean(np.square(res)) * 2)) if res else 0.0
    return Triangulation(point=X, rms=rms)


def _reprojection_and_jacobian(X, pose, intr, uv):
    pc = pose.rotation @ (X - pose.center)
    z = pc[2]
    if z <= 0:
        raise DegenerateGeometryError("triangulated point lies behind a camera")
    f = intr.focal_length
    cx, cy = intr.principal_point
    proj = np.array([f * pc[0] / z + cx, f * pc[1] / z + cy])
    dproj = np.array([[f / z, 0, -f * pc[0] / z**2], [0, f / z, -f * pc[1] / z**2]])
    return proj - np.asarray(uv, float), dproj @ pose.rotation


_CALIB_KEYS = ("focal_px", "cx", "cy", "k1", "k2", "k3", "p1", "p2", "v1", "v2", "v3", "v4", "width", "height")


def read_calibration(path) -> CameraIntrinsics:
    """Parse a ``key=value`` calibration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read calibration file {path}: {exc}") from exc
    values = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: malformed line {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = float(val)
    missing = {"focal_px", "cx", "cy", "width", "height"} - values.keys()
    if missing:
        raise InputError(f"{path}: missing keys {sorted(missing)}")
    g = lambda k: values.get(k, 0.0)
    return CameraIntrinsics(
        focal_length=g("focal_px"),
        principal_point=(g("cx"), g("cy")),
        sensor_size=(int(g("width")), int(g("height"))),
        radial_coeffs=(g("k1"), g("k2"), g("k3")),
        tangential_coeffs=(g("p1"), g("p2")),
        vignette_coeffs=(g("v1"), g("v2"), g("v3"), g("v4")),
    )


def write_calibration(path, intr: CameraIntrinsics) -> None:
    vals = dict(
        focal_px=intr.focal_length, cx=intr.principal_point[0], cy=intr.principal_point[1],
        k1=intr.radial_coeffs[0], k2=intr.radial_coeffs[1], k3=intr.radial_coeffs[2],
        p1=intr.tangential_coeffs[0], p2=intr.tangential_coeffs[1],
        v1=intr.vignette_coeffs[0], v2=intr.vignette_coeffs[1],
        v3=intr.vignette_coeffs[2], v4=intr.vignette_coeffs[3],
        width=intr.sensor_size[0], height=intr.sensor_size[1],
    )
    lines = [f"{k}={float(vals[k])!r}" if k not in ("width", "height") else f"{k}={int(vals[k])}" for k in _CALIB_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")
