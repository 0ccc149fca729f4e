"""Pipeline configuration: a flat ``key = value`` text file with typed defaults."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # paths, relative to the config file's directory
    images: str = "images"
    calibration: str = "calibration.txt"
    control: str = "control.txt"
    output: str = "output"
    reference: str = ""  # optional grid stem for deviation reporting

    working_megapixels: float = 1.0
    seed: int = 0
    workers: int = 1
    cache: bool = True

    # image preparation
    clahe_tiles: int = 8
    clahe_clip: float = 2.0

    # tie-points
    max_per_tile: int = 3
    detector_threshold: float = 2e-4
    match_ratio: float = 0.8
    inlier_threshold: float = 1.0  # px
    min_pair_inliers: int = 15

    # local and global adjustment
    observation_sigma: float = 1.0  # px
    bundle_tol: float = 1e-8
    bundle_max_iter: int = 50
    track_max_initial_rms: float = 40.0  # px
    track_outlier_floor: float = 1.5  # px

    # signalized targets and georeference
    target_diameter: float = 0.15  # m
    target_min_distance: float = 2.0  # m
    target_max_distance: float = 10.0  # m
    target_circularity: float = 0.85
    target_bright_on_dark: bool = True
    target_epipolar_threshold: float = 2.0  # px
    georef_inlier_radius: float = 0.02  # m
    control_sigma: float = 0.002  # m, used when the control file gives none

    # dense matching
    stereo_window: int = 15
    stereo_margin: int = 4
    stereo_min_ncc: float = 0.6
    stereo_min_overlap: float = 0.3
    stereo_depth: float = 5.0  # m, nominal wall distance for pair selection

    # surface grid; origin/axis empty means "fit from the points"
    grid_origin: tuple = ()
    grid_axis: tuple = ()
    grid_reference: tuple = ()
    grid_azimuth_bin: float = 0.002  # rad
    grid_axial_bin: float = 0.01  # m
    grid_axial_min: float = -1.5
    grid_axial_max: float = 2.5
    patch_mad_k: float = 3.0
    merge_base_sigma: float = 6.0  # bins
    merge_feather: float = 25.0  # bins

    # stage toggles
    dense: bool = True
    export_mesh: bool = True
    mesh_step: int = 2

    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    _RANGES = {
        "working_megapixels": (0.01, 100.0),
        "workers": (1, 256),
        "clahe_tiles": (1, 64),
        "clahe_clip": (0.0, 100.0),
        "max_per_tile": (1, 1000),
        "detector_threshold": (0.0, 1.0),
        "match_ratio": (0.1, 1.0),
        "inlier_threshold": (0.01, 100.0),
        "min_pair_inliers": (8, 100000),
        "observation_sigma": (1e-6, 1e3),
        "bundle_tol": (1e-16, 1.0),
        "bundle_max_iter": (1, 10000),
        "target_diameter": (1e-4, 10.0),
        "target_circularity": (0.0, 1.0),
        "stereo_window": (3, 99),
        "stereo_margin": (1, 64),
        "stereo_min_ncc": (-1.0, 1.0),
        "stereo_min_overlap": (0.0, 1.0),
        "grid_azimuth_bin": (1e-5, 1.0),
        "grid_axial_bin": (1e-4, 10.0),
        "patch_mad_k": (0.5, 100.0),
        "merge_base_sigma": (0.5, 1000.0),
        "merge_feather": (1.0, 10000.0),
        "mesh_step": (1, 1000),
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key, (lo, hi) in self._RANGES.items():
            v = getattr(self, key)
            if not (lo <= v <= hi):
                raise ConfigError(f"{key} = {v} outside [{lo}, {hi}]")
        if self.stereo_window % 2 == 0:
            raise ConfigError("stereo_window must be odd")
        if not self.target_min_distance < self.target_max_distance:
            raise ConfigError("target_min_distance must be below target_max_distance")
        if not self.grid_axial_min < self.grid_axial_max:
            raise ConfigError("grid_axial_min must be below grid_axial_max")
        for key in ("grid_origin", "grid_axis", "grid_reference"):
            if len(getattr(self, key)) not in (0, 3):
                raise ConfigError(f"{key} needs three comma-separated values")
        if bool(self.grid_origin) != bool(self.grid_axis):
            raise ConfigError("grid_origin and grid_axis must be given together")

    # ------------------------------------------------------------------ io
    def path(self, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls) if f.name != "base_dir"]

    @classmethod
    def from_text(cls, text: str, base_dir=".", overrides: dict[str, str] | None = None) -> "PipelineConfig":
        values: dict[str, str] = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        values.update(overrides or {})
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for k, v in values.items():
            if k not in cls.keys():
                raise ConfigError(f"unknown configuration key {k!r}")
            kwargs[k] = _parse(k, v, hints[k])
        return cls(**kwargs, base_dir=Path(base_dir))

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, path.parent, overrides)

    def to_text(self) -> str:
        lines = []
        for k in self.keys():
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _parse(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is tuple:
            return tuple(float(x) for x in value.split(",") if x.strip()) if value else ()
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def grid_frame(cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray] | None:
    """(origin, axis frame) from the configured design axis, or None when absent."""
    if not cfg.grid_axis:
        return None
    axis = np.asarray(cfg.grid_axis, float)
    axis /= np.linalg.norm(axis)
    ref = np.asarray(cfg.grid_reference, float) if cfg.grid_reference else np.array([0.0, 0.0, 1.0])
    ref = ref - axis * (ref @ axis)
    if np.linalg.norm(ref) < 1e-9:
        raise ConfigError("grid_reference is parallel to grid_axis")
    ref /= np.linalg.norm(ref)
    return np.asarray(cfg.grid_origin, float), np.column_stack([axis, ref, np.cross(axis, ref)])
