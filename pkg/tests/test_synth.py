import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tunnelscan import _raykernel
from tunnelscan.errors import InvalidSceneError
from tunnelscan.geometry import apply_distortion, pixel_rays, project_points, remove_distortion
from tunnelscan.synth import SceneConfig, SyntheticScene

SMALL = dict(width=160, height=240, focal_px=138.0, supersample=1)


@pytest.fixture(scope="module")
def scene():
    return SyntheticScene()


@pytest.fixture(scope="module")
def smooth():
    return SyntheticScene(SceneConfig(roughness_amplitude=0.0, **SMALL))


def kernel_args(sc):
    return sc.config.radius, sc._m.astype(np.float64), sc._kx, sc._phase, sc._amp


def test_camera_script(scene):
    ids = [c.id for c in scene.cameras]
    assert len(ids) == 12 and len(set(ids)) == 12
    for cam in scene.cameras:
        R = cam.pose.rotation
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    c0, c1 = scene.cameras[0].pose.center, scene.cameras[6].pose.center
    assert np.linalg.norm(c1 - c0) == pytest.approx(1.0, abs=0.01)


def test_depth_map_matches_ray_cylinder_distance(smooth):
    R = smooth.config.radius
    for cam in smooth.cameras[::5]:
        depth = smooth.depth_map(cam)
        w, h = smooth.intrinsics.sensor_size
        v, u = np.mgrid[0:h, 0:w].astype(float)
        d = pixel_rays(remove_distortion(np.stack([u.ravel(), v.ravel()], -1), smooth.intrinsics), cam.pose, smooth.intrinsics)
        o = cam.pose.center
        a = d[:, 1] ** 2 + d[:, 2] ** 2
        b = o[1] * d[:, 1] + o[2] * d[:, 2]
        c = o[1] ** 2 + o[2] ** 2 - R**2
        t = (-b + np.sqrt(b * b - a * c)) / a
        assert np.abs(depth.ravel() - t).max() < 1e-9


def test_depth_consistent_with_ground_truth_grid(scene):
    grid = scene.ground_truth_grid()
    rng = np.random.default_rng(0)
    i = rng.integers(0, grid.shape[0], 300)
    j = rng.integers(0, grid.shape[1], 300)
    th, x = grid.azimuth_centers[i], grid.axial_centers[j]
    r = grid.radius[i, j]
    local = np.c_[x, r * np.cos(th), r * np.sin(th)]
    cam = scene.cameras[0]
    o = cam.pose.center
    dirs = local - o
    dist = np.linalg.norm(dirs, axis=1)
    t = scene.intersect(o, dirs / dist[:, None])
    # the first hit along the ray is the grid point unless the surface occludes itself
    assert np.median(np.abs(t - dist)) < 1e-6
    assert np.mean(np.abs(t - dist) < 1e-6) > 0.99


def test_target_pixels_match_projection(scene):
    tp = scene.target_pixels()
    gposes = scene.global_poses()
    centers = {t.name: scene.to_global(t.center) for t in scene.targets}
    n = 0
    for cid, seen in tp.items():
        for name, uv in seen.items():
            ideal = project_points(centers[name][None], gposes[cid], scene.intrinsics)
            ref = apply_distortion(ideal, scene.intrinsics)[0]
            assert np.linalg.norm(uv - ref) < 0.1
            n += 1
    assert n >= 8
    assert {name for seen in tp.values() for name in seen} == {t.name for t in scene.rendered_targets}


def test_kernel_intersection_lies_on_surface(scene):
    rng = np.random.default_rng(1)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = scene.cameras[3].pose.center
    t = _raykernel.intersect_rays(o, d, *kernel_args(scene))
    p = o + t[:, None] * d
    rho = np.hypot(p[:, 1], p[:, 2])
    assert np.abs(rho - scene.surface_radius(np.arctan2(p[:, 2], p[:, 1]), p[:, 0])).max() < 1e-9


@given(st.floats(-np.pi, np.pi), st.floats(-20.0, 20.0))
def test_kernel_roughness_matches_reference(theta, x):
    sc = SyntheticScene()
    ref = sc.roughness(theta, x)
    got = _raykernel._roughness(theta, x, sc._m.astype(np.float64), sc._kx, sc._phase, sc._amp)
    assert np.allclose(got, [float(v) for v in ref], rtol=0, atol=1e-12)


def test_kernel_albedo_matches_reference(scene):
    rng = np.random.default_rng(2)
    th, x = rng.uniform(-np.pi, np.pi, 400), rng.uniform(-3, 4, 400)
    ref = scene.albedo(th, x)
    layers = np.array(scene._noise_layers(), dtype=np.float64)
    out, scratch = np.empty(3), np.empty(4)
    got = []
    for a, b in zip(th, x):
        _raykernel._albedo(a, b, layers, out, scratch)
        got.append(out.copy())
    assert np.abs(np.array(got) - ref).max() < 1e-9


def test_kernel_shading_matches_reference(scene):
    rng = np.random.default_rng(3)
    th, x = rng.uniform(-np.pi, np.pi, 50), rng.uniform(-3, 4, 50)
    for a, b in zip(th, x):
        p, n = scene.surface_point(a, b)
        ref = scene._shading(p[None], n[None])[0]
        assert _raykernel._shading(*p, *n, scene.lamp) == pytest.approx(ref, rel=1e-12)


def test_camera_outside_tunnel_rejected():
    with pytest.raises(InvalidSceneError):
        SyntheticScene(SceneConfig(camera_height=-5.5))


def test_rendering_is_deterministic():
    a, b = SyntheticScene(SceneConfig(**SMALL)), SyntheticScene(SceneConfig(**SMALL))
    cam = a.cameras[1]
    img = a.render_camera(cam)
    assert img.dtype == np.uint8 and img.shape == (240, 160, 3)
    assert np.array_equal(img, b.render_camera(b.cameras[1]))


def test_occluder_overwrites_region():
    cfg = SceneConfig(occluders="t0_r1:20:30:60:90", **SMALL)
    plain, occ = SyntheticScene(SceneConfig(**SMALL)), SyntheticScene(cfg)
    a, b = plain.render_camera(plain.cameras[1]), occ.render_camera(occ.cameras[1])
    diff = np.any(a != b, axis=-1)
    assert diff[30:90, 20:60].mean() > 0.9
    diff[30:90, 20:60] = False
    assert not diff.any()


def test_scene_config_text_round_trip():
    cfg = SceneConfig(n_targets=2, occluders="t0_r0:1:2:3:4", noise_sigma=0.25)
    assert SceneConfig.from_text(cfg.to_text()) == cfg


def test_write_dataset_layout(tmp_path):
    cfg = SceneConfig(n_rotations=1, **SMALL)
    sc = SyntheticScene(cfg)
    out = sc.write_dataset(tmp_path / "ds")
    assert sorted(p.name for p in (out / "images").iterdir()) == ["t0_r0.png", "t1_r0.png"]
    for name in ("calibration.txt", "control.txt", "scene.txt", "config.txt", "truth/poses.txt"):
        assert (out / name).is_file()
    assert SceneConfig.from_file(out / "scene.txt") == cfg
