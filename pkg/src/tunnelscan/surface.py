"""Tunnel surface model on an azimuth x axial grid around the tunnel axis.

Each bin stores a radial distance from the axis, a texture color and a
weight (0 marks a hole).  Rasters are indexed ``[azimuth, axial]``;
azimuth is measured from the frame's second axis toward its third and
covers ``[-pi, pi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputError, InvalidArgumentError, NoOverlapError, OutOfRangeError


@dataclass
class SphericalGrid:
    origin: np.ndarray
    axis_frame: np.ndarray  # columns: tunnel axis, azimuth reference, completing axis
    n_azimuth: int
    axial_min: float
    axial_bin: float
    n_axial: int
    radius: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)
    texture: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.axis_frame = np.asarray(self.axis_frame, dtype=float)
        if self.n_azimuth < 1 or self.n_axial < 1 or not self.axial_bin > 0:
            raise InvalidArgumentError("grid needs positive bin counts and bin size")
        shape = (self.n_azimuth, self.n_axial)
        if self.radius is None:
            self.radius = np.zeros(shape)
        if self.weight is None:
            self.weight = np.zeros(shape)
        if self.texture is None:
            self.texture = np.zeros(shape + (3,), dtype=np.float32)

    @classmethod
    def empty(cls, origin, axis_frame, azimuth_bin: float, axial_range: tuple[float, float], axial_bin: float):
        """Grid with ``azimuth_bin`` rounded so the bins tile the full circle."""
        n_az = max(1, int(round(2 * np.pi / azimuth_bin)))
        lo, hi = axial_range
        n_ax = max(1, int(round((hi - lo) / axial_bin)))
        return cls(origin=origin, axis_frame=axis_frame, n_azimuth=n_az, axial_min=lo,
                   axial_bin=axial_bin, n_axial=n_ax)

    @property
    def azimuth_bin(self) -> float:
        return 2 * np.pi / self.n_azimuth

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_azimuth, self.n_axial)

    @property
    def azimuth_centers(self) -> np.ndarray:
        return -np.pi + (np.arange(self.n_azimuth) + 0.5) * self.azimuth_bin

    @property
    def axial_centers(self) -> np.ndarray:
        return self.axial_min + (np.arange(self.n_axial) + 0.5) * self.axial_bin

    @property
    def axial_max(self) -> float:
        return self.axial_min + self.n_axial * self.axial_bin

    @property
    def valid(self) -> np.ndarray:
        return self.weight > 0

    def same_definition(self, other: "SphericalGrid") -> bool:
        return (
            self.n_azimuth == other.n_azimuth
            and self.n_axial == other.n_axial
            and np.isclose(self.axial_min, other.axial_min, rtol=0, atol=1e-12)
            and np.isclose(self.axial_bin, other.axial_bin, rtol=1e-12, atol=0)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
            and np.allclose(self.axis_frame, other.axis_frame, rtol=0, atol=1e-12)
        )

    def blank_like(self) -> "SphericalGrid":
        return replace(self, radius=None, weight=None, texture=None)

    def copy(self) -> "SphericalGrid":
        return replace(self, radius=self.radius.copy(), weight=self.weight.copy(), texture=self.texture.copy())

    def to_cylindrical(self, points: np.ndarray):
        """(axial, azimuth, radius) of world points."""
        local = (np.asarray(points, dtype=float) - self.origin) @ self.axis_frame
        axial = local[..., 0]
        azimuth = np.arctan2(local[..., 2], local[..., 1])
        radius = np.hypot(local[..., 1], local[..., 2])
        return axial, azimuth, radius

    def to_world(self, axial, azimuth, radius) -> np.ndarray:
        local = np.stack([axial, radius * np.cos(azimuth), radius * np.sin(azimuth)], axis=-1)
        return local @ self.axis_frame.T + self.origin

    def bin_index(self, axial, azimuth):
        """Integer (azimuth, axial) bin indices; axial -1 where outside the grid."""
        ia = np.floor((np.asarray(azimuth) + np.pi) / self.azimuth_bin).astype(int) % self.n_azimuth
        ix = np.floor((np.asarray(axial) - self.axial_min) / self.axial_bin).astype(int)
        ix = np.where((ix >= 0) & (ix < self.n_axial), ix, -1)
        return ia, ix


def _vec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")])


def save_grid(grid: SphericalGrid, stem) -> None:
    """Write ``<stem>_grid.txt``, ``<stem>_radius.npy`` (float32 m), ``<stem>_weight.npy`` and ``<stem>_texture.png``."""
    import cv2

    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    fmt = lambda v: ",".join(repr(float(x)) for x in np.ravel(v))
    lines = [
        f"origin={fmt(grid.origin)}",
        f"axis_frame={fmt(grid.axis_frame)}",
        f"n_azimuth={grid.n_azimuth}",
        f"axial_min={float(grid.axial_min)!r}",
        f"axial_bin={float(grid.axial_bin)!r}",
        f"n_axial={grid.n_axial}",
    ]
    Path(f"{stem}_grid.txt").write_text("\n".join(lines) + "\n")
    np.save(f"{stem}_radius.npy", np.where(grid.valid, grid.radius, 0.0).astype(np.float32))
    np.save(f"{stem}_weight.npy", grid.weight.astype(np.float32))
    tex = np.clip(np.rint(grid.texture), 0, 255).astype(np.uint8)
    cv2.imwrite(f"{stem}_texture.png", cv2.cvtColor(tex, cv2.COLOR_RGB2BGR))


def load_grid(stem) -> SphericalGrid:
    import cv2

    stem = Path(stem)
    try:
        meta = dict(
            line.split("=", 1) for line in Path(f"{stem}_grid.txt").read_text().splitlines() if "=" in line
        )
        radius = np.load(f"{stem}_radius.npy").astype(np.float64)
        weight = np.load(f"{stem}_weight.npy").astype(np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read grid {stem}: {exc}") from exc
    tex = cv2.imread(f"{stem}_texture.png", cv2.IMREAD_COLOR)
    texture = (cv2.cvtColor(tex, cv2.COLOR_BGR2RGB).astype(np.float32) if tex is not None
               else np.zeros(radius.shape + (3,), np.float32))
    return SphericalGrid(
        origin=_vec(meta["origin"]),
        axis_frame=_vec(meta["axis_frame"]).reshape(3, 3),
        n_azimuth=int(meta["n_azimuth"]),
        axial_min=float(meta["axial_min"]),
        axial_bin=float(meta["axial_bin"]),
        n_axial=int(meta["n_axial"]),
        radius=radius,
        weight=weight,
        texture=texture,
    )


# ----------------------------------------------------------------------------- axis
def fit_axis(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fallback tunnel frame from a point cloud: (origin, axis_frame).

    The axis is the principal direction whose variance stands apart from the
    other two (a ring is short and wide, a long bore is the opposite); the
    origin comes from an algebraic circle fit in the perpendicular plane.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 10:
        raise InvalidArgumentError("at least 10 points are needed to fit a tunnel axis")
    c = P.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov((P - c).T))
    gaps = [abs(evals[0] - evals[1]), abs(evals[2] - evals[1])]
    axis = evecs[:, 0] if gaps[0] > gaps[1] else evecs[:, 2]
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    frame = np.column_stack([axis, e1, e2])
    q = (P - c) @ frame[:, 1:]
    A = np.c_[2 * q, np.ones(len(q))]
    sol, *_ = np.linalg.lstsq(A, (q**2).sum(axis=1), rcond=None)
    origin = c + frame[:, 1:] @ sol[:2]
    return origin, frame


# ----------------------------------------------------------------------------- patches
@dataclass(frozen=True)
class PatchConfig:
    mad_k: float = 3.0
    scale_floor: float = 0.001  # m; keeps noise-free bins from rejecting on rounding
    neighbourhood: int = 1  # bins on each side used for the robust reference


def _neighbourhood_median(grid: np.ndarray, n: int) -> np.ndarray:
    """NaN-aware median over a (2n+1)^2 window, wrapping in azimuth."""
    stack = []
    padded = np.pad(grid, ((0, 0), (n, n)), constant_values=np.nan)
    for da in range(-n, n + 1):
        rolled = np.roll(padded, da, axis=0)
        for dx in range(-n, n + 1):
            stack.append(rolled[:, n + dx : n + dx + grid.shape[1]])
    stack = np.stack(stack)
    out = np.full(grid.shape, np.nan)
    any_ = np.isfinite(stack).any(axis=0)
    out[any_] = np.nanmedian(stack[:, any_], axis=0)
    return out


def _bin_median(bins: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    order = np.lexsort((values, bins))
    b, v = bins[order], values[order]
    starts = np.flatnonzero(np.r_[True, b[1:] != b[:-1]])
    counts = np.diff(np.r_[starts, len(b)])
    med = 0.5 * (v[starts + (counts - 1) // 2] + v[starts + counts // 2])
    out = np.full(size, np.nan)
    out[b[starts]] = med
    return out


def splat_points(points: np.ndarray, weights: np.ndarray, colors: np.ndarray | None,
                 template: SphericalGrid, config: PatchConfig | None = None) -> SphericalGrid:
    """Robust weighted per-bin radius and color of world ``points``."""
    cfg = config or PatchConfig()
    out = template.blank_like()
    axial, azimuth, radius = template.to_cylindrical(points)
    ia, ix = template.bin_index(axial, azimuth)
    keep = (ix >= 0) & np.isfinite(radius) & (radius > 0) & (np.asarray(weights) > 0)
    if not keep.any():
        return out
    size = template.n_azimuth * template.n_axial
    b = ia[keep] * template.n_axial + ix[keep]
    r = radius[keep]
    w = np.asarray(weights, float)[keep]

    ref = _neighbourhood_median(_bin_median(b, r, size).reshape(template.shape), cfg.neighbourhood).ravel()
    dev = np.abs(r - ref[b])
    spread = _neighbourhood_median(_bin_median(b, dev, size).reshape(template.shape), cfg.neighbourhood).ravel()
    scale = np.maximum(1.4826 * np.nan_to_num(spread[b]), cfg.scale_floor)
    inl = dev <= cfg.mad_k * scale
    b, r, w = b[inl], r[inl], w[inl]

    wsum = np.bincount(b, w, size)
    rsum = np.bincount(b, w * r, size)
    has = wsum > 0
    rad = np.zeros(size)
    rad[has] = rsum[has] / wsum[has]
    out.radius = rad.reshape(template.shape)
    out.weight = wsum.reshape(template.shape)
    if colors is not None:
        c = np.asarray(colors, float).reshape(-1, 3)[keep][inl]
        tex = np.zeros((size, 3))
        for k in range(3):
            tex[has, k] = np.bincount(b, w * c[:, k], size)[has] / wsum[has]
        out.texture = tex.reshape(template.shape + (3,)).astype(np.float32)
    return out


def reconstruct_patch(disparity, template: SphericalGrid, config: PatchConfig | None = None) -> SphericalGrid:
    """Triangulate every valid disparity and splat it onto ``template``'s grid.

    Point weights are the match confidences; colors come from the
    reference rectified image.  An empty valid set yields an empty patch.
    """
    valid = disparity.valid
    if not valid.any():
        return template.blank_like()
    yy, xx = np.nonzero(valid)
    x, y = xx.astype(float), yy.astype(float)
    pts = disparity.rectification.triangulate(x, y, disparity.scalar[valid])
    colors = disparity.reference_rgb[valid] if disparity.reference_rgb is not None else None
    return splat_points(pts, disparity.confidence[valid], colors, template, config)


# ----------------------------------------------------------------------------- merging
@dataclass(frozen=True)
class MergeConfig:
    base_sigma: float = 6.0  # bins; scale separating base from detail
    feather: float = 25.0  # bins over which a patch fades in from its border


def _smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(values, sigma, mode=("wrap", "nearest"), truncate=3.0)


def _base(grid: SphericalGrid, sigma: float) -> np.ndarray:
    """Normalized-convolution low-pass of the radius over the valid bins."""
    m = grid.valid.astype(float)
    num = _smooth(np.where(grid.valid, grid.radius, 0.0), sigma)
    den = _smooth(m, sigma)
    return np.where(grid.valid, num / np.maximum(den, 1e-12), 0.0)


def _feather(grid: SphericalGrid, width: float) -> np.ndarray:
    """Blend weight: distance from the coverage border (wrapping in azimuth) times smoothed weight."""
    pad = int(np.ceil(width)) + 1
    valid = grid.valid
    if valid.all():
        dist = np.full(valid.shape, np.inf)
    else:
        tiled = np.pad(valid, ((pad, pad), (0, 0)), mode="wrap")
        tiled = np.pad(tiled, ((0, 0), (1, 1)), constant_values=False)
        dist = ndimage.distance_transform_edt(tiled)[pad:-pad, 1:-1]
    ramp = np.clip(dist / width, 0.0, 1.0)
    w = _smooth(np.where(valid, grid.weight, 0.0), 2.0) / np.maximum(_smooth(valid.astype(float), 2.0), 1e-12)
    return np.where(valid, ramp * w, 0.0)


def _patch_key(grid: SphericalGrid) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for a in (grid.radius, grid.weight, grid.texture):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def merge_patches(patches: list[SphericalGrid], config: MergeConfig | None = None) -> SphericalGrid:
    """Blend patches on a common grid.

    The low-pass base of each patch is cross-faded with feathered weights;
    the detail layer (radius minus base) is kept from the patch with the
    largest blend weight in each bin.  Patches are put in a canonical order
    first, so the result does not depend on the order they are passed in.
    """
    cfg = config or MergeConfig()
    if not patches:
        raise InvalidArgumentError("no patches to merge")
    first = patches[0]
    for p in patches[1:]:
        if not first.same_definition(p):
            raise InvalidArgumentError("patches do not share a grid definition")
    patches = sorted(patches, key=_patch_key)
    alphas = np.stack([_feather(p, cfg.feather) for p in patches])
    bases = np.stack([_base(p, cfg.base_sigma) for p in patches])
    radii = np.stack([np.where(p.valid, p.radius, 0.0) for p in patches])

    top = np.argmax(alphas, axis=0)  # ties resolve to the first patch in canonical order
    take = lambda a: np.take_along_axis(a, top[None], axis=0)[0]
    r_top, b_top = take(radii), take(bases)
    asum = alphas.sum(axis=0)
    covered = asum > 0
    shift = (alphas * (bases - b_top[None])).sum(axis=0)

    out = first.blank_like()
    out.radius = np.where(covered, r_top + shift / np.where(covered, asum, 1.0), 0.0)
    out.weight = np.where(covered, np.stack([p.weight for p in patches]).sum(axis=0), 0.0)
    tex = np.stack([p.texture.astype(np.float64) for p in patches])
    tex_top = np.take_along_axis(tex, top[None, ..., None], axis=0)[0]
    tshift = (alphas[..., None] * (tex - tex_top[None])).sum(axis=0)
    out.texture = np.where(covered[..., None], tex_top + tshift / np.where(covered, asum, 1.0)[..., None], 0.0).astype(np.float32)
    return out


# ----------------------------------------------------------------------------- profiles
@dataclass
class Profile:
    station: float
    angles: np.ndarray  # rad, strictly increasing
    radii: np.ndarray  # m
    gaps: list[tuple[float, float]] = field(default_factory=list)  # unfilled azimuth intervals

    def points(self, grid: SphericalGrid) -> np.ndarray:
        """World coordinates of the samples."""
        return grid.to_world(np.full_like(self.angles, self.station), self.angles, self.radii)


def _fill_short_runs(values: np.ndarray, ok: np.ndarray, max_run: int) -> np.ndarray:
    """Linear fill (circular) of invalid runs no longer than ``max_run``; returns the new mask."""
    n = len(values)
    if ok.all() or not ok.any():
        return ok.copy()
    out_ok = ok.copy()
    start = int(np.flatnonzero(ok)[0])
    i = start
    idx = np.r_[np.arange(start, n), np.arange(0, start)]
    run = []
    for j in idx[1:].tolist() + [start]:
        if ok[j]:
            if run and len(run) <= max_run:
                a, b = values[i], values[j]
                for k, m in enumerate(run, 1):
                    values[m] = a + (b - a) * k / (len(run) + 1)
                    out_ok[m] = True
            run = []
            i = j
        else:
            run.append(j)
    return out_ok


def extract_profile(model: SphericalGrid, station: float, max_gap_bins: int = 3) -> Profile:
    """Cross-section at ``station`` (m along the axis).

    Interpolates linearly between the two nearest axial bin centers, needing
    both valid; a station on a bin center reads that bin directly.  Azimuth
    runs of up to ``max_gap_bins`` missing bins are bridged linearly, longer
    runs are reported as gaps.
    """
    if not (model.axial_min <= station <= model.axial_max):
        raise OutOfRangeError(f"station {station} outside model extent [{model.axial_min}, {model.axial_max}]")
    t = (station - model.axial_min) / model.axial_bin - 0.5
    t = min(max(t, 0.0), model.n_axial - 1.0)
    i0 = int(np.floor(t))
    f = t - i0
    if f == 0.0 or i0 + 1 >= model.n_axial:
        r = model.radius[:, i0].astype(float).copy()
        ok = model.valid[:, i0].copy()
    else:
        r = (1 - f) * model.radius[:, i0] + f * model.radius[:, i0 + 1]
        ok = model.valid[:, i0] & model.valid[:, i0 + 1]
    ok = _fill_short_runs(r, ok, max_gap_bins)
    ang = model.azimuth_centers
    gaps = []
    bad = ~ok
    if bad.any() and not bad.all():
        lab, n = ndimage.label(bad)
        for k in range(1, n + 1):
            idx = np.flatnonzero(lab == k)
            gaps.append((float(ang[idx[0]]), float(ang[idx[-1]])))
        # a run touching both ends wraps around
        if bad[0] and bad[-1] and n > 1:
            last = gaps.pop()
            gaps[0] = (last[0], gaps[0][1])
    elif bad.all():
        gaps.append((float(ang[0]), float(ang[-1])))
    return Profile(float(station), ang[ok], r[ok], gaps)


# ----------------------------------------------------------------------------- comparison
@dataclass
class Comparison:
    deviation: np.ndarray  # model minus reference, NaN outside the common coverage
    mean: float
    rms: float
    p95: float
    max: float
    count: int

    def to_text(self) -> str:
        return (f"bins {self.count}\nmean_mm {self.mean * 1e3:.3f}\nrms_mm {self.rms * 1e3:.3f}\n"
                f"p95_abs_mm {self.p95 * 1e3:.3f}\nmax_abs_mm {self.max * 1e3:.3f}\n")


def compare_models(model: SphericalGrid, reference: SphericalGrid) -> Comparison:
    """Signed radial deviation per bin where both grids have data."""
    if not model.same_definition(reference):
        raise InvalidArgumentError("models do not share a grid definition")
    both = model.valid & reference.valid
    if not both.any():
        raise NoOverlapError("models have no bins in common")
    dev = np.full(model.shape, np.nan)
    dev[both] = model.radius[both] - reference.radius[both]
    d = dev[both]
    a = np.abs(d)
    return Comparison(dev, float(d.mean()), float(np.sqrt((d**2).mean())), float(np.percentile(a, 95)),
                      float(a.max()), int(both.sum()))


def deviation_raster(deviation: np.ndarray, limit: float = 0.01) -> np.ndarray:
    """Unwrapped RGB uint8 raster (rows = azimuth): blue below, red above, gray where undefined."""
    t = np.clip(np.nan_to_num(deviation) / limit, -1.0, 1.0)
    anchors = np.array([-1.0, 0.0, 1.0])
    rgb = np.stack([np.interp(t, anchors, c) for c in ([0, 255, 220], [60, 255, 40], [220, 255, 30])], axis=-1)
    rgb[~np.isfinite(deviation)] = 128
    return rgb.astype(np.uint8)


# ----------------------------------------------------------------------------- export
def write_mesh(grid: SphericalGrid, path, step: int = 1) -> int:
    """ASCII PLY of the valid bins (every ``step``-th), quads split into triangles; returns the face count."""
    g = grid
    ia = np.arange(0, g.n_azimuth, step)
    ix = np.arange(0, g.n_axial, step)
    A, X = np.meshgrid(g.azimuth_centers[ia], g.axial_centers[ix], indexing="ij")
    R = g.radius[np.ix_(ia, ix)]
    V = g.valid[np.ix_(ia, ix)]
    C = np.clip(np.rint(g.texture[np.ix_(ia, ix)]), 0, 255).astype(int)
    P = g.to_world(X, A, R)
    index = -np.ones(V.shape, int)
    index[V] = np.arange(V.sum())
    wrap = len(ia) * step == g.n_azimuth
    faces = []
    na = len(ia) if wrap else len(ia) - 1
    for i in range(na):
        j = (i + 1) % len(ia)
        a, b = index[i, :-1], index[i, 1:]
        c, d = index[j, :-1], index[j, 1:]
        quad = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
        faces.extend(zip(a[quad], c[quad], b[quad]))
        faces.extend(zip(b[quad], c[quad], d[quad]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {int(V.sum())}\nproperty double x\nproperty double y\nproperty double z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for p, c in zip(P[V], C[V]):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return len(faces)
