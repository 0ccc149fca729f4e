"""Acceptance suite: one test per criterion, summarized at the end of the pytest run.

Run alone with ``pytest tests/test_acceptance.py -v``; the criteria that
need the rendered default scene share one dataset and one pipeline run.
"""

import numpy as np
import pytest
from conftest import (
    DISTRACTOR_KINDS,
    EXPORTS,
    make_network,
    paint_distractor,
    perturb,
    run_cli,
    tie_points,
)
from test_features import perturbation_precision
from test_surface import RADIUS, band, cylinder_disparity, filled, template

from tunnelscan import bundle
from tunnelscan.bundle import collinearity_jacobian, full_normal_step, initialize_local, solve
from tunnelscan.features import build_tracks, detect
from tunnelscan.geometry import project_points, read_calibration, rotvec_to_matrix
from tunnelscan.georef import ControlPoint, SimilarityTransform, assign_and_estimate, fit_similarity
from tunnelscan.imageprep import prepare_image
from tunnelscan.pipeline import read_images
from tunnelscan.surface import compare_models, load_grid, merge_patches, reconstruct_patch
from tunnelscan.targets import TargetConfig, detect_targets

criterion = pytest.mark.criterion


def detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="module")
def prepared_default(default_dataset):
    intr = read_calibration(default_dataset.root / "calibration.txt")
    return {r.id: prepare_image(r, intr) for r in read_images(default_dataset.root / "images")}


# ----------------------------------------------------------------------------- 1
@criterion(1, "end-to-end p95 radial deviation < 10 mm, runtime < 5 min")
def test_end_to_end_accuracy(request, default_dataset, first_run):
    res = first_run.result
    model = load_grid(first_run.output / "model")
    truth = load_grid(default_dataset.root / "truth" / "ground_truth")
    cmp = compare_models(model, truth)
    detail(request, f"exit {res.code}, p95 {cmp.p95 * 1e3:.2f} mm, rms {cmp.rms * 1e3:.2f} mm, "
                    f"{res.seconds:.0f} s")
    assert res.code == 0, first_run.report
    assert "frame global" in first_run.report
    assert cmp.p95 < 0.010
    assert res.seconds < 300


# ----------------------------------------------------------------------------- 2
@criterion(2, "Schur-reduced pose update equals full normal-equation solve to 1e-9")
def test_schur_equivalence(request):
    net = make_network(rotations=(0, 1, 2), max_tracks=50, seed=4)
    assert len(net.ids) == 6 and len(net.tracks) == 50
    gaps = []

    def check(sv, st, blocks, damping, da):
        full = full_normal_step(*blocks, sv, damping)
        gaps.append(np.linalg.norm(da - full) / np.linalg.norm(full))

    solve(net.problem(poses=perturb(net.poses, 2.0)), callback=check)
    detail(request, f"{len(gaps)} iterations, worst relative gap {max(gaps):.1e}")
    assert gaps and max(gaps) < 1e-9


# ----------------------------------------------------------------------------- 3
@criterion(3, "bundle converges from 2 deg to RMS < 1e-8 px; Jacobians match differences to 1e-5")
def test_bundle_correctness(request, network):
    rms = []
    for seed in (1, 2, 3):
        res = solve(network.problem(poses=perturb(network.poses, 2.0, seed)))
        rms.append(res.report.rms_after)
    worst = 0.0
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        R = rotvec_to_matrix(rng.normal(size=3))
        C = rng.normal(size=3)
        X = C + R.T @ np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 9)])
        uv = rng.uniform([0, 0], network.intr.sensor_size)
        _, Jw, Jc, JX = collinearity_jacobian(R, C, X, network.intr, uv)
        cases = [
            (Jw, lambda d: collinearity_jacobian(R @ rotvec_to_matrix(d), C, X, network.intr, uv)[0]),
            (Jc, lambda d: collinearity_jacobian(R, C + d, X, network.intr, uv)[0]),
            (JX, lambda d: collinearity_jacobian(R, C, X + d, network.intr, uv)[0]),
        ]
        for J, f in cases:
            num = np.stack([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(3)], axis=1)
            worst = max(worst, np.abs(num - J).max() / np.abs(J).max())
    detail(request, f"final rms {max(rms):.1e} px, Jacobian error {worst:.1e}")
    assert max(rms) < 1e-8
    assert worst < 1e-5


# ----------------------------------------------------------------------------- 4
@criterion(4, "local centres stay at (0,0,0) and (1,0,0); single-tripod tracks excluded")
def test_gauge_conformance(request, network):
    # every point is linked across all images that see it, except every fifth,
    # which is only linked among the first tripod's images
    n = len(network.points)
    positions, visible = {}, {}
    for iid, pose in zip(network.ids, network.poses):
        uv = project_points(network.points, pose, network.intr)
        w, h = network.intr.sensor_size
        visible[iid] = np.isfinite(uv).all(1) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        positions[iid] = uv
    tripod = {iid: t for iid, t, _ in network.meta}
    one_sided = np.arange(n) % 5 == 0
    pairs = {}
    for a in network.ids:
        for b in network.ids:
            if a >= b:
                continue
            both = visible[a] & visible[b]
            if tripod[a] != tripod[b] or tripod[a] == 1:
                both &= ~one_sided
            idx = np.flatnonzero(both)
            pairs[(a, b)] = np.c_[idx, idx]
    tracks = build_tracks(pairs, positions, tripod)
    kept = {t.feature_refs[0][1] for t in tracks}
    assert not kept & set(np.flatnonzero(one_sided))
    assert all({0, 1} <= set(t.tripods) for t in tracks)

    init = initialize_local(network.meta, tracks, network.intr)
    problem = bundle.AdjustmentProblem(init.image_ids, perturb(init.poses, 2.0), network.intr, init.tracks, init.points)
    res = solve(problem)
    centres = {tuple(float(c) for c in p.center) for p in res.poses}
    detail(request, f"{len(tracks)} tracks kept of {n}; centres {sorted(centres)}")
    assert centres == {(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)}
    for (iid, t, _), p in zip(network.meta, res.poses):
        assert np.array_equal(p.center, [float(t), 0.0, 0.0])


# ----------------------------------------------------------------------------- 5
@criterion(5, "georeference bijection with shuffled control and a spurious target; transform to 1e-10")
def test_georeference(request):
    known = SimilarityTransform(6.3, rotvec_to_matrix(np.array([0.02, -0.03, 0.61])), np.array([1000.0, 2000.0, 500.0]))
    local = np.array([[0.1, 0.78, 0.12], [1.9, -0.75, 0.3], [-0.4, -0.79, -0.05], [1.3, 0.8, -0.2]])
    glob = known.apply(local)
    control = [ControlPoint(f"T{i + 1}", glob[i]) for i in (3, 1, 0, 2)]
    detected = np.vstack([local[[2, 0, 3, 1]], [[0.9, 0.1, 0.79]]])
    g = assign_and_estimate(detected, control)
    T = g.transform
    err = max(abs(T.scale - known.scale) / known.scale, np.abs(T.rotation - known.rotation).max(),
              np.abs(T.translation - known.translation).max() / np.abs(known.translation).max())
    direct = fit_similarity(local, glob).transform
    err_direct = np.abs(direct.apply(local) - glob).max() / np.abs(glob).max()
    detail(request, f"assignment {g.assignment}, relative error {err:.1e}")
    assert g.assignment == {0: "T3", 1: "T1", 2: "T4", 3: "T2"}
    assert err < 1e-10 and err_direct < 1e-10


# ----------------------------------------------------------------------------- 6
def _ideal_target_centres(scene, pose, intr):
    """Targets whose whole disk projects inside the prepared image, by name."""
    w, h = intr.sensor_size
    out = {}
    for tg in scene.rendered_targets:
        c = scene.to_global(tg.center)
        if np.dot(scene.global_rotation @ tg.normal, pose.center - c) <= 0:
            continue
        uv = project_points(c[None], pose, intr)[0]
        if not np.all(np.isfinite(uv)):
            continue
        cam = pose.to_camera(c[None])[0]
        r = intr.focal_length * tg.diameter / 2 / cam[2]
        m = 1.6 * r + 3
        if m <= uv[0] <= w - 1 - m and m <= uv[1] <= h - 1 - m:
            out[tg.name] = uv
    return out


@criterion(6, "targets: recall 100%, centre error < 0.3 px, <= 1 false positive with 50 distractors")
def test_target_detection(request, default_dataset, prepared_default):
    scene = default_dataset.scene
    poses = scene.global_poses()
    cfg = TargetConfig()
    errors, views, false_pos = [], {}, 0
    for iid, prep in prepared_default.items():
        truth = _ideal_target_centres(scene, poses[iid], prep.intrinsics)
        found = detect_targets(prep, cfg)
        for name, uv in truth.items():
            d = min([np.linalg.norm(f.center - uv) for f in found] or [np.inf])
            errors.append(d)
            views[name] = views.get(name, 0) + 1
        false_pos += sum(min([np.linalg.norm(f.center - u) for u in truth.values()] or [np.inf]) > 0.3 for f in found)
    assert set(views) == {t.name for t in scene.rendered_targets}
    assert min(views.values()) >= 2
    clean_recall = np.mean(np.array(errors) < 0.3)

    # distractors on the busiest image
    iid = max(prepared_default, key=lambda k: len(_ideal_target_centres(scene, poses[k], prepared_default[k].intrinsics)))
    prep = prepared_default[iid]
    truth = list(_ideal_target_centres(scene, poses[iid], prep.intrinsics).values())
    gray = prep.gray.copy()
    rng = np.random.default_rng(0)
    h, w = gray.shape
    placed = 0
    while placed < 50:
        c = rng.uniform([40, 40], [w - 40, h - 40])
        if min(np.linalg.norm(c - t) for t in truth) < 60:
            continue
        paint_distractor(gray, DISTRACTOR_KINDS[placed % 5], c, rng.uniform(6, 14), rng)
        placed += 1
    found = detect_targets(gray, cfg, focal_px=prep.intrinsics.focal_length)
    hits = sum(min(np.linalg.norm(f.center - t) for t in truth) < 0.3 for f in found)
    detail(request, f"{len(errors)} target views, recall {clean_recall:.0%}, max error {max(errors):.3f} px, "
                    f"{false_pos} false positives clean, {len(found) - hits} with distractors")
    assert clean_recall == 1.0
    assert max(errors) < 0.3
    assert false_pos == 0
    assert hits == len(truth)
    assert len(found) - hits <= 1


# ----------------------------------------------------------------------------- 7
@criterion(7, "30-100 tie-points per image; matching precision >= 0.95 under perturbation")
def test_tie_point_yield(request, first_run, prepared_default):
    counts = tie_points(first_run.report)
    precisions = [perturbation_precision(detect(p).descriptors, seed=i)[0]
                  for i, p in enumerate(prepared_default.values())]
    detail(request, f"tie-points {min(counts.values())}-{max(counts.values())}, precision >= {min(precisions):.3f}")
    assert len(counts) == 12
    assert all(30 <= n <= 100 for n in counts.values()), counts
    assert min(precisions) >= 0.95


# ----------------------------------------------------------------------------- 8
@criterion(8, "cylinder patch within 1 mm; seam step < 0.2 mm; compare(a,a) = 0; antisymmetry")
def test_dense_surface(request, network):
    patch = reconstruct_patch(cylinder_disparity(network.poses[1], network.poses[7], network.intr), template())
    patch_err = np.abs(patch.radius[patch.valid] - RADIUS).max()

    tpl = template()
    merged = merge_patches([filled(tpl, RADIUS, band(tpl, 0, 120)), filled(tpl, RADIUS + 0.001, band(tpl, 80, 200))])
    v = merged.valid
    seam = max(np.abs(np.diff(merged.radius, axis=1))[v[:, 1:] & v[:, :-1]].max(),
               np.abs(np.diff(merged.radius, axis=0))[v[1:] & v[:-1]].max())

    rng = np.random.default_rng(0)
    a = filled(tpl, RADIUS + rng.normal(0, 0.01, tpl.shape), rng.uniform(size=tpl.shape) > 0.2)
    b = filled(tpl, RADIUS + rng.normal(0, 0.01, tpl.shape), rng.uniform(size=tpl.shape) > 0.3)
    self_dev = compare_models(a, a).deviation
    ab, ba = compare_models(a, b).deviation, compare_models(b, a).deviation
    both = np.isfinite(ab)
    detail(request, f"patch error {patch_err * 1e3:.1e} mm, seam step {seam * 1e3:.3f} mm")
    assert patch.valid.sum() > 20000 and patch_err < 1e-3
    assert seam < 0.2e-3
    assert np.all(self_dev[np.isfinite(self_dev)] == 0)
    assert np.array_equal(both, np.isfinite(ba)) and np.array_equal(ab[both], -ba[both])


# ----------------------------------------------------------------------------- 9
@criterion(9, "identical config and seed give bitwise-identical exports")
def test_determinism(request, default_dataset, first_run, tmp_path):
    second = run_cli("run", default_dataset.config, "--no-cache", "--set", f"output={tmp_path}")
    assert second.code == first_run.result.code == 0
    differing = [f for f in EXPORTS if (tmp_path / f).read_bytes() != (first_run.output / f).read_bytes()]
    detail(request, f"{len(EXPORTS)} export files compared, {len(differing)} differ")
    assert not differing
    assert not (tmp_path / "cache").exists()
