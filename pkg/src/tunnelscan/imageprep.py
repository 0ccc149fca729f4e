"""Raw exposure preparation: undistortion, vignetting, downscaling, equalization, tiling."""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import InvalidArgumentError
from .geometry import CameraIntrinsics, ImageRecord, apply_distortion

VIGNETTE_GAIN_BOUNDS = (0.2, 1.0)


@dataclass
class PreparedImage:
    id: str
    rgb: np.ndarray = field(repr=False)  # undistorted, float32, 0..255
    gray_eq: np.ndarray = field(repr=False)  # equalized uint8
    scale_factor: float
    tile_layout: list[tuple[int, int, int, int]]  # (x0, y0, x1, y1), half-open
    intrinsics: CameraIntrinsics  # ideal pinhole at working resolution
    tripod_index: int = 0
    rotation_index: int = 0
    source: np.ndarray | None = field(default=None, repr=False)  # raw raster at working resolution
    source_intrinsics: CameraIntrinsics | None = None  # with distortion and vignetting

    @property
    def gray(self) -> np.ndarray:
        return to_gray(self.rgb)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


def to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim == 2:
        return rgb
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def tile_layout(shape: tuple[int, int], grid: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    """Split a raster into ``grid = (rows, cols)`` rectangles covering it exactly."""
    h, w = shape
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"tile grid must be >= 1, got {grid}")
    ys = np.linspace(0, h, rows + 1).round().astype(int)
    xs = np.linspace(0, w, cols + 1).round().astype(int)
    return [(int(xs[j]), int(ys[i]), int(xs[j + 1]), int(ys[i + 1])) for i in range(rows) for j in range(cols)]


def undistort_and_devignette(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Resample a raw raster onto the ideal pinhole grid and flatten vignetting.

    Returns float32 with the same channel layout as the input.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    if (w, h) != tuple(intr.sensor_size):
        raise InvalidArgumentError(
            f"raster size {(w, h)} does not match calibrated sensor size {tuple(intr.sensor_size)}"
        )
    src = pixels.astype(np.float32)
    if not intr.has_distortion and not any(intr.vignette_coeffs):
        return src.copy()

    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    if intr.has_distortion:
        raw = apply_distortion(np.stack([u, v], axis=-1), intr)
        map_x = raw[..., 0].astype(np.float32)
        map_y = raw[..., 1].astype(np.float32)
        out = cv2.remap(src, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        ru, rv = raw[..., 0], raw[..., 1]
    else:
        out = src.copy()
        ru, rv = u, v
    if any(intr.vignette_coeffs):
        gain = np.clip(intr.vignette_gain(ru, rv), *VIGNETTE_GAIN_BOUNDS).astype(np.float32)
        if out.ndim == 3:
            gain = gain[..., None]
        out = out / gain
    return out


def equalize_adaptive(raster: np.ndarray, tile_grid: tuple[int, int] = (8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a gray raster.

    Histograms are clipped at ``clip_limit`` times the uniform bin height
    with the excess spread evenly, and neighbouring tile mappings are
    blended bilinearly.  Returns uint8.
    """
    rows, cols = tile_grid
    if rows < 1 or cols < 1:
        raise InvalidArgumentError(f"tile grid must be >= 1, got {tile_grid}")
    if not clip_limit > 0:
        raise InvalidArgumentError(f"clip limit must be positive, got {clip_limit}")
    img = np.clip(np.rint(np.asarray(raster, dtype=np.float64)), 0, 255).astype(np.intp)
    h, w = img.shape
    th, tw = -(-h // rows), -(-w // cols)
    padded = np.pad(img, ((0, th * rows - h), (0, tw * cols - w)), mode="reflect" if min(h, w) > 1 else "edge")
    n = th * tw

    tiles = padded.reshape(rows, th, cols, tw).transpose(0, 2, 1, 3).reshape(rows * cols, n)
    offsets = (np.arange(rows * cols) * 256)[:, None]
    hist = np.bincount((tiles + offsets).ravel(), minlength=rows * cols * 256).reshape(rows * cols, 256)
    hist = hist.astype(np.float64)
    clip = max(1.0, clip_limit * n / 256.0)
    excess = np.maximum(hist - clip, 0).sum(axis=1, keepdims=True)
    hist = np.minimum(hist, clip) + excess / 256.0
    luts = (255.0 * np.cumsum(hist, axis=1) / n).reshape(rows, cols, 256)

    cy = (np.arange(rows) + 0.5) * th - 0.5
    cx = (np.arange(cols) + 0.5) * tw - 0.5
    fy = np.interp(np.arange(h), cy, np.arange(rows))
    fx = np.interp(np.arange(w), cx, np.arange(cols))
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    out = (
        (1 - wy) * (1 - wx) * luts[Y0, X0, img]
        + (1 - wy) * wx * luts[Y0, X1, img]
        + wy * (1 - wx) * luts[Y1, X0, img]
        + wy * wx * luts[Y1, X1, img]
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def downscale(raster: np.ndarray, factor: float) -> np.ndarray:
    """Area-averaged resampling by ``factor`` in (0, 1]."""
    if not 0 < factor <= 1:
        raise InvalidArgumentError(f"downscale factor must be in (0, 1], got {factor}")
    if factor == 1:
        return np.array(raster, copy=True)
    h, w = raster.shape[:2]
    size = (max(1, round(w * factor)), max(1, round(h * factor)))
    return cv2.resize(raster, size, interpolation=cv2.INTER_AREA)


def working_factor(sensor_size: tuple[int, int], megapixels: float | None) -> float:
    """Scale factor bringing a sensor to roughly ``megapixels`` (never upsampling)."""
    if megapixels is None or megapixels <= 0:
        return 1.0
    w, h = sensor_size
    return min(1.0, float(np.sqrt(megapixels * 1e6 / (w * h))))


def prepare_image(
    record: ImageRecord,
    intr: CameraIntrinsics,
    factor: float = 1.0,
    tile_grid: tuple[int, int] = (8, 8),
    clip_limit: float = 2.0,
) -> PreparedImage:
    pixels = record.pixels
    h, w = pixels.shape[:2]
    if (w, h) != tuple(intr.sensor_size):
        raise InvalidArgumentError(
            f"image {record.id}: size {(w, h)} does not match calibration {tuple(intr.sensor_size)}"
        )
    if factor < 1:
        pixels = downscale(pixels, factor)
        nh, nw = pixels.shape[:2]
        intr = intr.scaled(factor, (nw, nh))
    rgb = undistort_and_devignette(pixels, intr)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    eq = equalize_adaptive(to_gray(rgb), tile_grid, clip_limit)
    return PreparedImage(
        id=record.id,
        rgb=rgb,
        gray_eq=eq,
        scale_factor=factor,
        tile_layout=tile_layout(rgb.shape[:2], tile_grid),
        intrinsics=intr.ideal(),
        tripod_index=record.tripod_index,
        rotation_index=record.rotation_index,
        source=pixels,
        source_intrinsics=intr,
    )
