"""End-to-end orchestration: images and control in, surface model and report out."""

from __future__ import annotations

import hashlib
import itertools
import pickle
import re
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from . import bundle, features, georef, stereo, surface, targets
from .config import PipelineConfig, grid_frame
from .errors import (
    GeoreferenceError,
    InputError,
    InsufficientMatchesError,
    InvalidDatasetError,
    RankDeficiencyError,
    TunnelScanError,
)
from .geometry import CameraPose, ImageRecord, project_points, read_calibration
from .imageprep import prepare_image, working_factor

WARNING_EXIT = 4
CACHE_VERSION = "3"
_NAME = re.compile(r"^t(\d+)_r(\d+)$")


@dataclass
class StageRecord:
    name: str
    seconds: float
    status: str  # ok, cached, warning, failed
    message: str = ""


@dataclass
class RunReport:
    stages: list[StageRecord] = field(default_factory=list)
    tie_points: dict[str, int] = field(default_factory=dict)
    pair_inliers: dict[str, int] = field(default_factory=dict)
    local_rms: tuple[float, float] | None = None
    global_rms: tuple[float, float] | None = None
    removed_tracks: int = 0
    targets_found: int = 0
    assignment: dict[str, str] = field(default_factory=dict)
    georef_rms: float | None = None
    frame: str = "local"
    dense_pairs: list[str] = field(default_factory=list)
    deviation: surface.Comparison | None = None
    warnings: list[str] = field(default_factory=list)
    failed_stage: str | None = None
    error: str | None = None
    exit_status: int = 0

    def to_text(self) -> str:
        out = ["tunnelscan run report", f"exit_status {self.exit_status}", f"frame {self.frame}"]
        if self.failed_stage:
            out.append(f"failed_stage {self.failed_stage}")
            out.append(f"error {self.error}")
        out.append("")
        out.append("stage                seconds  status")
        for s in self.stages:
            out.append(f"{s.name:<20} {s.seconds:8.2f}  {s.status}{('  ' + s.message) if s.message else ''}")
        if self.tie_points:
            out.append("")
            out.append("tie-points per image")
            for k, v in self.tie_points.items():
                out.append(f"  {k} {v}")
        if self.pair_inliers:
            out.append("geometric inliers per image pair")
            for k, v in self.pair_inliers.items():
                out.append(f"  {k} {v}")
        if self.local_rms:
            out.append(f"local bundle rms px: before {self.local_rms[0]:.4f} after {self.local_rms[1]:.4f}")
            out.append(f"tracks removed as outliers: {self.removed_tracks}")
        out.append(f"targets localized: {self.targets_found}")
        if self.assignment:
            out.append("target assignment")
            for k, v in self.assignment.items():
                out.append(f"  {k} -> {v}")
        if self.georef_rms is not None:
            out.append(f"similarity rms m: {self.georef_rms:.5f}")
        if self.global_rms:
            out.append(f"global bundle rms px: before {self.global_rms[0]:.4f} after {self.global_rms[1]:.4f}")
        if self.dense_pairs:
            out.append("dense pairs: " + ", ".join(self.dense_pairs))
        if self.deviation is not None:
            out.append("deviation from reference")
            out.extend("  " + ln for ln in self.deviation.to_text().splitlines())
        for w in self.warnings:
            out.append(f"warning: {w}")
        return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------- helpers
def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
    return h.hexdigest()


def read_images(folder: Path) -> list[ImageRecord]:
    """``t<tripod>_r<rotation>.png|jpg|tif`` files, sorted by name."""
    if not folder.is_dir():
        raise InputError(f"image folder {folder} does not exist")
    out = []
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".tif", ".tiff"):
            continue
        m = _NAME.match(p.stem)
        if not m:
            raise InputError(f"image name {p.name} does not follow t<tripod>_r<rotation>")
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        if img is None:
            raise InputError(f"cannot decode image {p}")
        out.append(ImageRecord(p.stem, int(m.group(1)), int(m.group(2)), cv2.cvtColor(img, cv2.COLOR_BGR2RGB)))
    if not out:
        raise InputError(f"no images in {folder}")
    return out


def track_residuals(poses: dict[str, CameraPose], intr, tracks, points) -> np.ndarray:
    """Largest reprojection error (px) of each track."""
    out = np.zeros(len(tracks))
    for i, (t, X) in enumerate(zip(tracks, points)):
        worst = 0.0
        for iid, uv in t.observations:
            p = project_points(X[None], poses[iid], intr)[0]
            worst = max(worst, float(np.hypot(*(p - uv))) if np.all(np.isfinite(p)) else np.inf)
        out[i] = worst
    return out


def _sweep_adjacent(a, b, n_rot: dict[int, int]) -> bool:
    (_, ta, ka), (_, tb, kb) = a, b
    n = max(n_rot[ta], n_rot[tb])
    return min((ka - kb) % n, (kb - ka) % n) <= 1


# ----------------------------------------------------------------------------- pipeline
class Pipeline:
    def __init__(self, config: PipelineConfig, log=None):
        self.cfg = config
        self.out = config.path("output")
        self.report = RunReport()
        self.log = log or (lambda msg: None)
        self._key = ""

    # -------------------------------------------------------------- caching
    def _stage(self, name: str, key_parts, fn):
        self._key = _digest(CACHE_VERSION, self._key, name, key_parts)
        path = self.out / "cache" / f"{name}.pkl"
        t0 = time.perf_counter()
        if self.cfg.cache and path.exists():
            try:
                with path.open("rb") as fh:
                    key, value = pickle.load(fh)
                if key == self._key:
                    self.log(f"{name}: cached")
                    return self._record(name, t0, value, "cached")
            except (OSError, pickle.UnpicklingError, EOFError, ValueError):
                pass
        self.log(f"{name}: running")
        try:
            value = fn()
        except TunnelScanError as exc:
            self.report.stages.append(StageRecord(name, time.perf_counter() - t0, "failed", str(exc)))
            self.report.failed_stage = name
            raise
        if self.cfg.cache:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("wb") as fh:
                pickle.dump((self._key, value), fh, protocol=pickle.HIGHEST_PROTOCOL)
        return self._record(name, t0, value, "ok")

    def _record(self, name, t0, value, status):
        rec = StageRecord(name, time.perf_counter() - t0, status)
        if isinstance(value, tuple) and value and isinstance(value[-1], _Warn):
            rec.status, rec.message = f"{status}, warning", value[-1].message
            self.report.warnings.append(f"{name}: {value[-1].message}")
        self.report.stages.append(rec)
        return value

    # -------------------------------------------------------------- run
    def run(self) -> RunReport:
        cfg = self.cfg
        rep = self.report
        self.out.mkdir(parents=True, exist_ok=True)
        cv2.setNumThreads(cfg.workers)
        try:
            self._run()
            rep.exit_status = WARNING_EXIT if rep.warnings else 0
        except TunnelScanError as exc:
            rep.failed_stage = rep.failed_stage or "setup"
            rep.error = f"{type(exc).__name__}: {exc}"
            rep.exit_status = exc.exit_code
        except Exception as exc:  # unexpected: still leave a report behind
            rep.failed_stage = rep.failed_stage or (rep.stages[-1].name if rep.stages else "setup")
            rep.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
            rep.exit_status = 1
        finally:
            (self.out / "report.txt").write_text(rep.to_text())
        return rep

    def _run(self) -> None:
        cfg, rep = self.cfg, self.report
        try:
            intr_raw = read_calibration(cfg.path("calibration"))
        except OSError as exc:
            raise InputError(f"cannot read calibration: {exc}") from exc
        records = read_images(cfg.path("images"))
        # where results go and whether they are cached does not change them
        keyed = replace(cfg, output="", cache=True)
        inputs = _digest(keyed.to_text(), intr_raw, [(r.id, hashlib.sha256(r.pixels.tobytes()).hexdigest()) for r in records])
        self._key = inputs

        preps = self._stage("prep", (cfg.working_megapixels, cfg.clahe_tiles, cfg.clahe_clip),
                            lambda: self._prep(records, intr_raw))
        intr = next(iter(preps.values())).intrinsics
        meta = [(p.id, p.tripod_index, p.rotation_index) for p in preps.values()]

        feats, pair_matches, tracks = self._stage(
            "features", (cfg.max_per_tile, cfg.detector_threshold, cfg.match_ratio, cfg.inlier_threshold,
                         cfg.min_pair_inliers, cfg.seed), lambda: self._features(preps, meta))
        rep.pair_inliers = {f"{a}-{b}": len(m) for (a, b), m in sorted(pair_matches.items())}

        local = self._stage("local_bundle", (cfg.observation_sigma, cfg.bundle_tol, cfg.bundle_max_iter,
                                             cfg.track_max_initial_rms, cfg.track_outlier_floor),
                            lambda: self._local_bundle(meta, tracks, intr))
        ids, poses, ltracks, lpoints, removed, lrep = local
        rep.local_rms = (lrep.rms_before, lrep.rms_after)
        rep.removed_tracks = removed
        rep.tie_points = {iid: sum(iid in t.image_ids for t in ltracks) for iid in ids}

        local_targets = self._stage(
            "targets", (cfg.target_diameter, cfg.target_min_distance, cfg.target_max_distance,
                        cfg.target_circularity, cfg.target_bright_on_dark, cfg.target_epipolar_threshold),
            lambda: self._targets(preps, dict(zip(ids, poses)), intr))
        rep.targets_found = len(local_targets)

        geo = self._stage("georef", (cfg.control, cfg.georef_inlier_radius, cfg.control_sigma, cfg.seed),
                          lambda: self._georef(local_targets))
        geo_result = geo[0]
        if geo_result is not None:
            gref, control = geo_result
            names = {i: n for i, n in gref.assignment.items()}
            rep.assignment = {f"target{i}": n for i, n in names.items()}
            rep.georef_rms = gref.rms
            glob = self._stage("global_bundle", (cfg.bundle_tol, cfg.bundle_max_iter),
                               lambda: self._global_bundle(ids, poses, ltracks, lpoints, local_targets, gref,
                                                           control, intr, meta))
            poses, points, grep = glob
            rep.global_rms = (grep.rms_before, grep.rms_after)
            rep.frame = "global"
        else:
            points = lpoints
        pose_of = dict(zip(ids, poses))

        template = self._template(points, rep.frame == "global")
        if not cfg.dense:
            rep.warnings.append("dense stage disabled; no surface model produced")
            return
        patches, pairs = self._stage(
            "dense", (cfg.stereo_window, cfg.stereo_margin, cfg.stereo_min_ncc, cfg.stereo_min_overlap,
                      cfg.stereo_depth, cfg.patch_mad_k, _digest(template.origin.tobytes(), template.axis_frame.tobytes(),
                                                                 template.n_azimuth, template.n_axial,
                                                                 template.axial_min, template.axial_bin)),
            lambda: self._dense(preps, meta, pose_of, ltracks, points, intr, template))
        rep.dense_pairs = [f"{a}-{b}" for a, b in pairs]
        model = self._stage("surface", (cfg.merge_base_sigma, cfg.merge_feather),
                            lambda: surface.merge_patches(patches, surface.MergeConfig(cfg.merge_base_sigma,
                                                                                         cfg.merge_feather)))
        t0 = time.perf_counter()
        self._export(model)
        rep.stages.append(StageRecord("export", time.perf_counter() - t0, "ok"))

    # -------------------------------------------------------------- stages
    def _prep(self, records, intr_raw):
        factor = working_factor(intr_raw.sensor_size, self.cfg.working_megapixels)
        tiles = (self.cfg.clahe_tiles, self.cfg.clahe_tiles)
        return {r.id: prepare_image(r, intr_raw, factor, tiles, self.cfg.clahe_clip) for r in records}

    def _features(self, preps, meta):
        cfg = self.cfg
        feats = {iid: features.detect(p, max_per_tile=cfg.max_per_tile, threshold=cfg.detector_threshold)
                 for iid, p in preps.items()}
        n_rot = {t: sum(1 for _, tt, _ in meta if tt == t) for t in (0, 1)}
        pair_matches = {}
        for a, b in itertools.combinations(meta, 2):
            if not _sweep_adjacent(a, b, n_rot):
                continue
            fa, fb = feats[a[0]], feats[b[0]]
            m = features.match_pair(fa, fb, ratio=cfg.match_ratio)
            try:
                res = features.filter_geometric(m, fa.positions, fb.positions, cfg.inlier_threshold, seed=cfg.seed)
            except InsufficientMatchesError:
                continue
            if len(res.matches) >= cfg.min_pair_inliers:
                pair_matches[(a[0], b[0])] = res.matches
        positions = {iid: f.positions for iid, f in feats.items()}
        tripods = {iid: t for iid, t, _ in meta}
        tracks = features.build_tracks(pair_matches, positions, tripods)
        if not tracks:
            raise InsufficientMatchesError("no tie-point tracks connect the two tripod positions")
        return feats, pair_matches, tracks

    def _local_bundle(self, meta, tracks, intr):
        """Initialize, adjust, drop tracks with gross residuals, adjust again."""
        cfg = self.cfg
        init = bundle.initialize_local(meta, tracks, intr)
        tripod = {iid: t for iid, t, _ in meta}
        groups = [tripod[i] for i in init.image_ids]
        pose_of = dict(zip(init.image_ids, init.poses))
        res0 = track_residuals(pose_of, intr, init.tracks, init.points)
        keep = res0 <= cfg.track_max_initial_rms
        trk = [t for t, k in zip(init.tracks, keep) if k]
        pts = init.points[keep]
        removed = int((~keep).sum())
        result = None
        for _ in range(2):
            if len(trk) < 6:
                raise InsufficientMatchesError(f"{len(trk)} usable tie-point tracks after cleaning")
            prob = bundle.AdjustmentProblem(init.image_ids, init.poses, intr, trk, pts, cfg.observation_sigma,
                                            mode="local", center_groups=groups)
            result = bundle.solve(prob, tol=cfg.bundle_tol, max_iter=cfg.bundle_max_iter)
            act = result.active
            res = track_residuals(dict(zip(init.image_ids, result.poses)), intr, trk, result.points)
            ok = act & np.isfinite(res)
            limit = max(3 * 1.4826 * float(np.median(res[ok])) if ok.any() else 0.0, cfg.track_outlier_floor)
            good = ok & (res <= limit)
            if good.all():
                break
            removed += int((~good).sum())
            trk = [t for t, g in zip(trk, good) if g]
            pts = result.points[good]
        else:
            prob = bundle.AdjustmentProblem(init.image_ids, init.poses, intr, trk, pts, cfg.observation_sigma,
                                            mode="local", center_groups=groups)
            result = bundle.solve(prob, tol=cfg.bundle_tol, max_iter=cfg.bundle_max_iter)
        act = result.active
        trk = [t for t, a in zip(trk, act) if a]
        return (init.image_ids, result.poses, trk, result.points[act], removed, result.report)

    def _targets(self, preps, poses, intr):
        cfg = self.cfg
        tcfg = targets.TargetConfig(diameter=cfg.target_diameter,
                                    distance_range=(cfg.target_min_distance, cfg.target_max_distance),
                                    circularity_tolerance=cfg.target_circularity,
                                    bright_on_dark=cfg.target_bright_on_dark)
        det = {iid: targets.detect_targets(p, tcfg) for iid, p in preps.items()}
        return targets.correspond_targets(det, poses, intr, epipolar_threshold=cfg.target_epipolar_threshold)

    def _georef(self, local_targets):
        cfg = self.cfg
        if not cfg.control:
            return (None, _Warn("no control file configured; results stay in the local frame"))
        control = georef.read_control(cfg.path("control"))
        if len(local_targets) < 3:
            return (None, _Warn(f"{len(local_targets)} targets localized, 3 needed; results stay in the local frame"))
        try:
            g = georef.assign_and_estimate([t.local_point for t in local_targets], control,
                                           inlier_radius=cfg.georef_inlier_radius, seed=cfg.seed)
        except (GeoreferenceError, RankDeficiencyError) as exc:
            return (None, _Warn(f"georeference failed ({exc}); results stay in the local frame"))
        return ((g, control),)

    def _global_bundle(self, ids, poses, ltracks, lpoints, local_targets, gref, control, intr, meta):
        cfg = self.cfg
        tripod = {iid: t for iid, t, _ in meta}
        by_name = {c.name: c for c in control}
        ttracks, tpoints, ctrl = [], [], []
        for i, lt in enumerate(local_targets):
            obs = [(o.image_id, np.asarray(o.center, float)) for o in lt.observations]
            ttracks.append(features.FeatureTrack(-1 - i, obs, [tripod[iid] for iid, _ in obs]))
            tpoints.append(lt.local_point)
            if i in gref.assignment:
                c = by_name[gref.assignment[i]]
                ctrl.append(bundle.ControlObservation(len(ltracks) + i, c.global_point, c.sigma))
        all_tracks = list(ltracks) + ttracks
        all_points = np.vstack([lpoints, np.asarray(tpoints).reshape(-1, 3)])
        problem = bundle.AdjustmentProblem(ids, poses, intr, all_tracks, all_points, cfg.observation_sigma,
                                           mode="local", center_groups=[tripod[i] for i in ids])
        local = bundle.AdjustmentResult(poses, all_points, np.ones(len(all_tracks), bool), None)
        res = bundle.solve_global(local, problem, gref.transform, ctrl, tol=cfg.bundle_tol,
                                  max_iter=cfg.bundle_max_iter)
        return res.poses, res.points[: len(ltracks)], res.report

    def _template(self, points, georeferenced: bool) -> surface.SphericalGrid:
        cfg = self.cfg
        frame = grid_frame(cfg) if georeferenced else None
        if frame is not None:
            origin, axes = frame
            lo, hi = cfg.grid_axial_min, cfg.grid_axial_max
        else:
            origin, axes = surface.fit_axis(points)
            axial = (np.asarray(points) - origin) @ axes[:, 0]
            lo, hi = np.percentile(axial, [1, 99])
            lo = np.floor(lo / cfg.grid_axial_bin) * cfg.grid_axial_bin
            hi = np.ceil(hi / cfg.grid_axial_bin) * cfg.grid_axial_bin
            if not georeferenced:
                self.report.warnings.append("surface grid axis fitted to local-frame tie-points")
        return surface.SphericalGrid.empty(origin, axes, cfg.grid_azimuth_bin, (lo, hi), cfg.grid_axial_bin)

    def _dense(self, preps, meta, poses, tracks, points, intr, template):
        cfg = self.cfg
        scfg = stereo.StereoConfig(window=cfg.stereo_window, margin=cfg.stereo_margin, min_ncc=cfg.stereo_min_ncc,
                                   min_overlap=cfg.stereo_min_overlap)
        pairs = stereo.select_pairs([(iid, t) for iid, t, _ in meta], poses, intr, cfg.stereo_depth,
                                    cfg.stereo_min_overlap)
        patches, used = [], []
        pcfg = surface.PatchConfig(mad_k=cfg.patch_mad_k)
        for a, b in pairs:
            both = np.array([a in t.image_ids and b in t.image_ids for t in tracks], bool)
            seeds = points[both] if both.sum() >= scfg.min_seeds else points
            try:
                dm = stereo.dense_match((a, b), preps[a], preps[b], poses[a], poses[b], seeds, scfg)
            except InsufficientMatchesError as exc:
                self.report.warnings.append(f"dense pair {a}-{b} skipped: {exc}")
                continue
            patches.append(surface.reconstruct_patch(dm, template, pcfg))
            used.append((a, b))
            self.log(f"dense: {a}-{b} valid {dm.valid.mean():.2f}")
        if not patches:
            raise InsufficientMatchesError("no stereo pair produced a disparity map")
        return patches, used

    def _export(self, model: surface.SphericalGrid) -> None:
        cfg, out = self.cfg, self.out
        surface.save_grid(model, out / "model")
        if cfg.export_mesh:
            surface.write_mesh(model, out / "model.ply", step=cfg.mesh_step)
        cols = np.flatnonzero(model.valid.any(axis=0))
        if cols.size:
            station = float(model.axial_centers[cols[len(cols) // 2]])
            prof = surface.extract_profile(model, station)
            lines = [f"# station {station!r} m; angle_rad radius_m"]
            lines += [f"{a:.6f} {r:.6f}" for a, r in zip(prof.angles, prof.radii)]
            lines += [f"# gap {g0:.6f} {g1:.6f}" for g0, g1 in prof.gaps]
            (out / "profile.txt").write_text("\n".join(lines) + "\n")
        if cfg.reference:
            ref = surface.load_grid(cfg.path("reference"))
            if not ref.same_definition(model):
                self.report.warnings.append("reference grid differs from the model grid; no deviation computed")
                return
            # score the exported (float32) radii so the figures match a later `compare`
            cmp = surface.compare_models(surface.load_grid(out / "model"), ref)
            self.report.deviation = cmp
            (out / "deviation.txt").write_text(cmp.to_text())
            cv2.imwrite(str(out / "deviation.png"),
                        cv2.cvtColor(surface.deviation_raster(cmp.deviation), cv2.COLOR_RGB2BGR))


@dataclass
class _Warn:
    message: str


def run(config: PipelineConfig, log=None) -> RunReport:
    return Pipeline(config, log).run()
