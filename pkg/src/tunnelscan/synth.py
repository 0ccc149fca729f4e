"""Synthetic tunnel scenes with exactly known geometry.

A scene is a rough cylinder around the tunnel X axis, textured with
procedural rock/shotcrete albedo and lit by one point lamp behind the
cameras.  Two tripods each record a vertical sweep about the tunnel axis.
Everything is built in a tunnel frame and mapped to the global (survey)
frame by a fixed rigid transform.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import InputError, InvalidSceneError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    ImageRecord,
    apply_distortion,
    pixel_rays,
    remove_distortion,
    rotvec_to_matrix,
    sweep_rotation,
    write_calibration,
)
from .surface import SphericalGrid


@dataclass
class SceneConfig:
    radius: float = 5.0
    roughness_amplitude: float = 0.05
    roughness_seed: int = 7
    roughness_terms: int = 12
    roughness_wavelength_min: float = 0.5
    roughness_wavelength_max: float = 3.0
    texture_seed: int = 11
    width: int = 816
    height: int = 1224
    focal_px: float = 704.0
    k1: float = -0.1
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    v1: float = -0.3
    v2: float = 0.0
    v3: float = 0.0
    v4: float = 0.0
    n_rotations: int = 6
    baseline: float = 1.0
    camera_lateral: float = 0.0
    camera_height: float = -0.5
    tripod1_offset_y: float = 0.04
    tripod1_offset_z: float = -0.02
    leveling_deg: float = 1.5
    pose_seed: int = 3
    lamp_x: float = -5.0
    lamp_y: float = 0.0
    lamp_z: float = 1.0
    noise_sigma: float = 0.5
    noise_seed: int = 5
    n_targets: int = 4
    target_diameter: float = 0.15
    target_standoff: float = 0.02
    extra_control: int = 0
    control_sigma: float = 0.002
    supersample: int = 2
    global_yaw_deg: float = 35.0
    global_grade_deg: float = 1.0
    global_x: float = 1000.0
    global_y: float = 2000.0
    global_z: float = 500.0
    grid_azimuth_bin: float = 0.002
    grid_axial_bin: float = 0.01
    grid_axial_min: float = -1.5
    grid_axial_max: float = 2.5
    occluders: str = ""  # "image_id:x0:y0:x1:y1;..."

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read scene file {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise InputError(f"unknown scene key {key!r}")
            kind = types[key]
            kw[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))


@dataclass
class Target:
    name: str
    center: np.ndarray  # tunnel frame
    normal: np.ndarray  # unit, pointing into the tunnel
    diameter: float


@dataclass
class SceneCamera:
    id: str
    tripod_index: int
    rotation_index: int
    pose: CameraPose  # tunnel frame


_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0x165667B19E3779F9)
_F1 = np.uint64(0xFF51AFD7ED558CCD)
_F2 = np.uint64(0xC4CEB9FE1A85EC53)


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    h = (i.astype(np.int64).view(np.uint64) * _M1) ^ (j.astype(np.int64).view(np.uint64) * _M2)
    h ^= np.uint64((seed * int(_M3)) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= _F1
    h ^= h >> np.uint64(33)
    h *= _F2
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(a: np.ndarray, b: np.ndarray, period_a: int, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1], periodic with ``period_a`` cells along ``a``."""
    ia = np.floor(a)
    ib = np.floor(b)
    fa = a - ia
    fb = b - ib
    ia = ia.astype(np.int64)
    ib = ib.astype(np.int64)
    ia0 = ia % period_a
    ia1 = (ia + 1) % period_a
    wa = fa * fa * fa * (fa * (fa * 6 - 15) + 10)
    wb = fb * fb * fb * (fb * (fb * 6 - 15) + 10)
    v00 = _hash01(ia0, ib, seed)
    v10 = _hash01(ia1, ib, seed)
    v01 = _hash01(ia0, ib + 1, seed)
    v11 = _hash01(ia1, ib + 1, seed)
    return (v00 * (1 - wa) + v10 * wa) * (1 - wb) + (v01 * (1 - wa) + v11 * wa) * wb


_TEXTURE_FIELDS = (
    ((0.03, 0.06, 0.12, 0.25), (0.4, 0.3, 0.2, 0.1)),  # fine texture
    ((0.035, 0.07), (0.6, 0.4)),  # shotcrete grain
    ((0.4,), (1.0,)),  # tint
    ((1.5, 3.0), (0.6, 0.4)),  # rock / shotcrete classes
)


def _mix_albedo(fine, fine2, tint, rockiness):
    rock = np.clip((rockiness - 0.4) / 0.2, 0, 1)
    rock = rock * rock * (3 - 2 * rock)
    rock_rgb = np.stack([0.50 + 0.10 * tint, 0.42 + 0.04 * tint, 0.34 - 0.06 * tint], axis=-1)
    rock_rgb = rock_rgb * (0.25 + 1.3 * fine)[..., None]
    crete_rgb = np.stack([0.72 + 0.0 * tint, 0.72 + 0.02 * tint, 0.70 + 0.04 * tint], axis=-1)
    crete_rgb = crete_rgb * (0.55 + 0.8 * (0.6 * fine2 + 0.4 * fine))[..., None]
    out = rock[..., None] * rock_rgb + (1 - rock[..., None]) * crete_rgb
    return np.clip(out, 0, 1)


class SyntheticScene:
    def __init__(self, config: SceneConfig | None = None):
        self.config = cfg = config or SceneConfig()
        if cfg.radius <= 0 or cfg.n_rotations < 1:
            raise InvalidSceneError("radius and rotation count must be positive")
        rng = np.random.default_rng(cfg.roughness_seed)
        n = cfg.roughness_terms
        lam_arc = np.exp(rng.uniform(np.log(cfg.roughness_wavelength_min), np.log(cfg.roughness_wavelength_max), n))
        lam_ax = np.exp(rng.uniform(np.log(cfg.roughness_wavelength_min), np.log(cfg.roughness_wavelength_max), n))
        # integer azimuthal wave numbers keep the field periodic around the tunnel
        self._m = np.maximum(1, np.round(2 * np.pi * cfg.radius / lam_arc))
        self._kx = 2 * np.pi / lam_ax * rng.choice([-1.0, 1.0], n)
        self._phase = rng.uniform(0, 2 * np.pi, n)
        amp = np.sqrt(lam_arc * lam_ax)
        self._amp = cfg.roughness_amplitude * amp / amp.sum() if n else amp

        self.intrinsics = CameraIntrinsics(
            focal_length=cfg.focal_px,
            principal_point=((cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0),
            sensor_size=(cfg.width, cfg.height),
            radial_coeffs=(cfg.k1, cfg.k2, cfg.k3),
            tangential_coeffs=(cfg.p1, cfg.p2),
            vignette_coeffs=(cfg.v1, cfg.v2, cfg.v3, cfg.v4),
        )
        self.lamp = np.array([cfg.lamp_x, cfg.lamp_y, cfg.lamp_z])
        yaw, grade = np.radians(cfg.global_yaw_deg), np.radians(cfg.global_grade_deg)
        self.global_rotation = rotvec_to_matrix([0, 0, yaw]) @ rotvec_to_matrix([0, -grade, 0])
        self.global_translation = np.array([cfg.global_x, cfg.global_y, cfg.global_z])
        self.cameras = self._camera_script()
        self.targets = self._place_targets()
        for cam in self.cameras:
            c = cam.pose.center
            h, _, _ = self.roughness(np.arctan2(c[2], c[1]), c[0])
            if np.hypot(c[1], c[2]) >= cfg.radius + h - 0.1:
                raise InvalidSceneError(f"camera {cam.id} is not inside the tunnel")

    # ----------------------------------------------------------------- geometry
    def roughness(self, theta, x):
        """Radial displacement and its partial derivatives in azimuth and axial position."""
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        h = np.zeros(np.broadcast(theta, x).shape)
        h_t = np.zeros_like(h)
        h_x = np.zeros_like(h)
        for m, kx, ph, a in zip(self._m, self._kx, self._phase, self._amp):
            arg = m * theta + kx * x + ph
            c, s = np.cos(arg), np.sin(arg)
            h += a * c
            h_t -= a * m * s
            h_x -= a * kx * s
        return h, h_t, h_x

    def surface_radius(self, theta, x):
        return self.config.radius + self.roughness(theta, x)[0]

    def surface_point(self, theta: float, x: float) -> tuple[np.ndarray, np.ndarray]:
        """Surface point and inward unit normal in the tunnel frame."""
        h, h_t, h_x = self.roughness(theta, x)
        r = self.config.radius + h
        er = np.array([0.0, np.cos(theta), np.sin(theta)])
        et = np.array([0.0, -np.sin(theta), np.cos(theta)])
        ex = np.array([1.0, 0.0, 0.0])
        p = x * ex + r * er
        outward = er - (h_t / r) * et - h_x * ex
        return p, -outward / np.linalg.norm(outward)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit with the rough cylinder (unit ``dirs``)."""
        from ._raykernel import intersect_rays

        t = intersect_rays(np.asarray(origin, np.float64), np.ascontiguousarray(dirs, np.float64).reshape(-1, 3),
                           self.config.radius, self._m.astype(np.float64), self._kx, self._phase, self._amp)
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise InvalidSceneError("ray missed the tunnel surface")
        return t

    # ----------------------------------------------------------------- layout
    def _camera_script(self) -> list[SceneCamera]:
        cfg = self.config
        rng = np.random.default_rng(cfg.pose_seed)
        lev = np.radians(cfg.leveling_deg)
        centers = [
            np.array([0.0, cfg.camera_lateral, cfg.camera_height]),
            np.array([cfg.baseline, cfg.camera_lateral + cfg.tripod1_offset_y, cfg.camera_height + cfg.tripod1_offset_z]),
        ]
        cams = []
        for tripod, c in enumerate(centers):
            rig = rotvec_to_matrix(rng.uniform(-lev, lev, 3))
            for k in range(cfg.n_rotations):
                pitch = 2 * np.pi * k / cfg.n_rotations
                R = sweep_rotation(pitch) @ rig.T
                cams.append(SceneCamera(f"t{tripod}_r{k}", tripod, k, CameraPose(R, c.copy())))
        return cams

    def _place_targets(self) -> list[Target]:
        cfg = self.config
        layout = [(0.15, -0.6), (-0.25, 1.9), (np.pi - 0.2, -0.4), (-np.pi + 0.3, 2.0), (1.2, 0.6), (-1.8, 1.1)]
        extra = [(0.1, 8.0), (np.pi - 0.1, -7.0), (0.4, 12.0), (-2.9, -9.0)]
        targets = []
        for i, (theta, x) in enumerate(layout[: cfg.n_targets] + extra[: cfg.extra_control]):
            p, n = self.surface_point(theta, x)
            targets.append(Target(f"T{i + 1}", p + cfg.target_standoff * n, n, cfg.target_diameter))
        return targets

    @property
    def rendered_targets(self) -> list[Target]:
        return self.targets[: self.config.n_targets]

    def to_global(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.global_rotation.T + self.global_translation

    def global_pose(self, pose: CameraPose) -> CameraPose:
        return CameraPose(pose.rotation @ self.global_rotation.T, self.to_global(pose.center))

    def global_poses(self) -> dict[str, CameraPose]:
        return {cam.id: self.global_pose(cam.pose) for cam in self.cameras}

    def grid_frame(self) -> tuple[np.ndarray, np.ndarray]:
        """Design tunnel axis in the global frame: origin and axis frame columns."""
        return self.global_translation.copy(), self.global_rotation.copy()

    def ground_truth_grid(self) -> SphericalGrid:
        cfg = self.config
        origin, frame = self.grid_frame()
        grid = SphericalGrid.empty(origin, frame, cfg.grid_azimuth_bin,
                                   (cfg.grid_axial_min, cfg.grid_axial_max), cfg.grid_axial_bin)
        th, xx = np.meshgrid(grid.azimuth_centers, grid.axial_centers, indexing="ij")
        grid.radius = self.surface_radius(th, xx)
        grid.weight = np.ones(grid.shape)
        grid.texture = (self.albedo(th, xx) * 255).astype(np.float32)
        return grid

    # ----------------------------------------------------------------- shading
    def _noise_layers(self):
        """(layer id, period, cell, weight, seed) rows for the four texture fields."""
        R = self.config.radius
        rows = []
        for layer, (cells, weights) in enumerate(_TEXTURE_FIELDS):
            s = self.config.texture_seed + 1000 * layer
            total = sum(weights)
            for cell, w in zip(cells, weights):
                rows.append((layer, max(1, int(np.round(2 * np.pi * R / cell))), cell, w / total, s))
                s += 101
        return rows

    def albedo(self, theta, x) -> np.ndarray:
        """Reference (vectorized) albedo; the renderer uses a compiled copy."""
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        fields = [np.zeros(np.broadcast(theta, x).shape) for _ in _TEXTURE_FIELDS]
        for layer, period, cell, w, s in self._noise_layers():
            fields[layer] = fields[layer] + w * value_noise(theta * period / (2 * np.pi), x / cell, period, s)
        return _mix_albedo(*fields)

    def _shading(self, p: np.ndarray, normal: np.ndarray) -> np.ndarray:
        to_lamp = self.lamp - p
        dist = np.linalg.norm(to_lamp, axis=-1)
        cos = np.maximum(np.einsum("ij,ij->i", normal, to_lamp) / dist, 0.0)
        return 0.35 + 0.65 * cos * (7.0 / dist) ** 2

    def _shade_rays(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """RGB radiance in [0, ~1.3] for unit rays in the tunnel frame."""
        from ._raykernel import shade_rays

        layers = np.array(self._noise_layers(), dtype=np.float64)
        tg = self.rendered_targets
        centers = np.array([t.center for t in tg]).reshape(-1, 3)
        normals = np.array([t.normal for t in tg]).reshape(-1, 3)
        diam = np.array([t.diameter for t in tg], dtype=np.float64)
        rgb, t = shade_rays(
            np.asarray(origin, np.float64), np.ascontiguousarray(dirs, np.float64), self.config.radius,
            self._m.astype(np.float64), self._kx, self._phase, self._amp, layers,
            self.lamp, centers, normals, diam,
        )
        if not np.all(np.isfinite(t)):
            raise InvalidSceneError("ray missed the tunnel surface")
        return rgb

    # ----------------------------------------------------------------- rendering
    def _raw_rays(self, cam: SceneCamera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        # all cameras share intrinsics, so undistorted sample positions are cached
        key = (u.shape, float(u.flat[0]), float(v.flat[0]), float(u.flat[-1]), float(v.flat[-1]), u.size)
        cache = self.__dict__.setdefault("_ideal_cache", {})
        ideal = cache.get(key)
        if ideal is None:
            ideal = remove_distortion(np.stack([u, v], axis=-1), self.intrinsics)
            if len(cache) < 256:
                cache[key] = ideal
        return pixel_rays(ideal, cam.pose, self.intrinsics)

    def depth_map(self, cam: SceneCamera) -> np.ndarray:
        """Distance along each pixel-center ray to the tunnel surface (targets ignored)."""
        w, h = self.intrinsics.sensor_size
        v, u = np.mgrid[0:h, 0:w].astype(float)
        dirs = self._raw_rays(cam, u.ravel(), v.ravel())
        return self.intersect(cam.pose.center, dirs).reshape(h, w)

    def _render_block(self, cam, u, v, ss):
        offs = (np.arange(ss) + 0.5) / ss - 0.5
        du, dv = np.meshgrid(offs, offs)
        su = (u[..., None] + du.ravel()).ravel()
        sv = (v[..., None] + dv.ravel()).ravel()
        dirs = self._raw_rays(cam, su, sv)
        rgb = self._shade_rays(cam.pose.center, dirs)
        return rgb.reshape(u.shape + (ss * ss, 3)).mean(axis=-2)

    def render_camera(self, cam: SceneCamera, chunk_rows: int = 48) -> np.ndarray:
        cfg = self.config
        w, h = self.intrinsics.sensor_size
        img = np.zeros((h, w, 3))
        cols = np.arange(w, dtype=float)
        for r0 in range(0, h, chunk_rows):
            rows = np.arange(r0, min(h, r0 + chunk_rows), dtype=float)
            u, v = np.meshgrid(cols, rows)
            img[r0 : r0 + len(rows)] = self._render_block(cam, u, v, cfg.supersample)

        # targets get dense supersampling so their centroids are unbiased
        for tg in self.rendered_targets:
            box = self._target_box(cam, tg)
            if box is None:
                continue
            x0, y0, x1, y1 = box
            u, v = np.meshgrid(np.arange(x0, x1, dtype=float), np.arange(y0, y1, dtype=float))
            img[y0:y1, x0:x1] = self._render_block(cam, u, v, 8)

        v, u = np.mgrid[0:h, 0:w].astype(float)
        img *= self.intrinsics.vignette_gain(u, v)[..., None]
        img *= 200.0
        if cfg.noise_sigma > 0:
            seed = cfg.noise_seed * 1000 + cam.tripod_index * 100 + cam.rotation_index
            img += np.random.default_rng(seed).normal(0.0, cfg.noise_sigma, img.shape)
        for occ in self._occluders_for(cam.id):
            x0, y0, x1, y1 = occ
            orng = np.random.default_rng(x0 * 7919 + y0)
            patch = orng.uniform(20, 230, ((y1 - y0) // 4 + 1, (x1 - x0) // 4 + 1, 3))
            patch = np.kron(patch, np.ones((4, 4, 1)))[: y1 - y0, : x1 - x0]
            img[y0:y1, x0:x1] = patch
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    def _occluders_for(self, image_id: str):
        for spec in filter(None, self.config.occluders.split(";")):
            iid, *coords = spec.split(":")
            if iid == image_id:
                yield tuple(int(c) for c in coords)

    def _target_box(self, cam: SceneCamera, tg: Target, margin: int = 3):
        ang = np.linspace(0, 2 * np.pi, 32, endpoint=False)
        a = np.cross(tg.normal, [1.0, 0.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(tg.normal, a)
        rim = tg.center + 0.8 * tg.diameter * (np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b)
        pc = cam.pose.to_camera(rim)
        if np.any(pc[:, 2] <= 0):
            return None
        f = self.intrinsics.focal_length
        cx, cy = self.intrinsics.principal_point
        ideal = np.stack([f * pc[:, 0] / pc[:, 2] + cx, f * pc[:, 1] / pc[:, 2] + cy], axis=-1)
        # beyond the calibrated field the distortion polynomial folds back
        if np.hypot(ideal[:, 0] - cx, ideal[:, 1] - cy).max() > 1.1 * self.intrinsics.diagonal_radius:
            return None
        raw = apply_distortion(ideal, self.intrinsics)
        w, h = self.intrinsics.sensor_size
        x0 = int(np.floor(raw[:, 0].min())) - margin
        x1 = int(np.ceil(raw[:, 0].max())) + margin + 1
        y0 = int(np.floor(raw[:, 1].min())) - margin
        y1 = int(np.ceil(raw[:, 1].max())) + margin + 1
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
        if x0 >= x1 or y0 >= y1:
            return None
        return x0, y0, x1, y1

    def target_pixels(self) -> dict[str, dict[str, np.ndarray]]:
        """Raw (distorted) pixel positions of every rendered target center visible per image."""
        out = {}
        w, h = self.intrinsics.sensor_size
        for cam in self.cameras:
            seen = {}
            for tg in self.rendered_targets:
                pc = cam.pose.to_camera(tg.center[None])[0]
                if pc[2] <= 0 or np.dot(tg.normal, cam.pose.center - tg.center) <= 0:
                    continue
                f = self.intrinsics.focal_length
                cx, cy = self.intrinsics.principal_point
                ideal = np.array([f * pc[0] / pc[2] + cx, f * pc[1] / pc[2] + cy])
                # far outside the frame the distortion polynomial folds back inside
                if np.hypot(ideal[0] - cx, ideal[1] - cy) > self.intrinsics.diagonal_radius:
                    continue
                raw = apply_distortion(ideal, self.intrinsics)
                if 0 <= raw[0] <= w - 1 and 0 <= raw[1] <= h - 1:
                    seen[tg.name] = raw
            out[cam.id] = seen
        return out

    def render(self) -> list[ImageRecord]:
        return [
            ImageRecord(cam.id, cam.tripod_index, cam.rotation_index, self.render_camera(cam), "default")
            for cam in self.cameras
        ]

    # ----------------------------------------------------------------- output
    def write_dataset(self, outdir, images: list[ImageRecord] | None = None) -> Path:
        """Write a dataset in the pipeline's input layout plus ground truth."""
        outdir = Path(outdir)
        (outdir / "images").mkdir(parents=True, exist_ok=True)
        (outdir / "truth").mkdir(exist_ok=True)
        images = images if images is not None else self.render()
        for rec in images:
            cv2.imwrite(str(outdir / "images" / f"{rec.id}.png"), cv2.cvtColor(rec.pixels, cv2.COLOR_RGB2BGR))
        write_calibration(outdir / "calibration.txt", self.intrinsics)
        cfg = self.config
        lines = ["# name x y z sigma (meters, global frame)"]
        for tg in self.targets:
            g = self.to_global(tg.center)
            lines.append(f"{tg.name} {float(g[0])!r} {float(g[1])!r} {float(g[2])!r} {float(cfg.control_sigma)!r}")
        (outdir / "control.txt").write_text("\n".join(lines) + "\n")
        (outdir / "scene.txt").write_text(cfg.to_text())

        from .surface import save_grid

        save_grid(self.ground_truth_grid(), outdir / "truth" / "ground_truth")
        pose_lines = []
        for cid, pose in self.global_poses().items():
            vals = " ".join(repr(float(x)) for x in np.concatenate([pose.rotation.ravel(), pose.center]))
            pose_lines.append(f"{cid} {vals}")
        (outdir / "truth" / "poses.txt").write_text("\n".join(pose_lines) + "\n")
        tp_lines = [f"{cid} {name} {float(uv[0])!r} {float(uv[1])!r}" for cid, d in self.target_pixels().items() for name, uv in d.items()]
        (outdir / "truth" / "target_pixels.txt").write_text("\n".join(tp_lines) + "\n")

        origin, frame = self.grid_frame()
        conf = [
            "images = images",
            "calibration = calibration.txt",
            "control = control.txt",
            "output = output",
            "reference = truth/ground_truth",
            "grid_origin = " + ",".join(repr(float(x)) for x in origin),
            "grid_axis = " + ",".join(repr(float(x)) for x in frame[:, 0]),
            "grid_reference = " + ",".join(repr(float(x)) for x in frame[:, 1]),
            f"grid_azimuth_bin = {float(cfg.grid_azimuth_bin)!r}",
            f"grid_axial_bin = {float(cfg.grid_axial_bin)!r}",
            f"grid_axial_min = {float(cfg.grid_axial_min)!r}",
            f"grid_axial_max = {float(cfg.grid_axial_max)!r}",
        ]
        (outdir / "config.txt").write_text("\n".join(conf) + "\n")
        return outdir
