import dataclasses

import numpy as np
import pytest
from conftest import make_network, perturb

from tunnelscan import bundle
from tunnelscan.bundle import (
    AdjustmentProblem,
    ControlObservation,
    Weights,
    collinearity_jacobian,
    cost_breakdown,
    full_normal_step,
    initialize_local,
    solve,
    solve_global,
    weight_observations,
)
from tunnelscan.errors import GaugeDeficiencyError, InvalidArgumentError, InvalidDatasetError
from tunnelscan.features import FeatureTrack
from tunnelscan.geometry import CameraPose, rotvec_to_matrix
from tunnelscan.georef import SimilarityTransform


def roll_about_x(a, b):
    """Angle of the rotation about X that best maps point cloud ``a`` onto ``b``."""
    s = np.sum(a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1])
    c = np.sum(a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2])
    return np.arctan2(s, c)


def relative_rotations(poses):
    return np.array([p.rotation @ poses[0].rotation.T for p in poses])


@pytest.fixture(scope="module")
def small():
    return make_network(rotations=(0, 1, 2), max_tracks=50, seed=4)


@pytest.fixture(scope="module")
def noisy():
    return make_network(noise=0.5, seed=7)


def test_initial_sweep_geometry():
    images = [(f"t{t}_r{k}", t, k) for t in (0, 1) for k in range(6)]
    init = initialize_local(images, [], bundle.CameraIntrinsics(704.0, (407.5, 611.5), (816, 1224)))
    for (iid, t, k), pose in zip(images, init.poses):
        assert np.array_equal(pose.center, [float(t), 0, 0])
        assert pose.fixed_position
        pitch = np.degrees(np.arctan2(pose.rotation[2, 2], pose.rotation[2, 1]))
        assert pitch % 360 == pytest.approx(60.0 * k, abs=1e-9)


def test_initializer_needs_both_tripods(intr):
    with pytest.raises(InvalidDatasetError):
        initialize_local([("t0_r0", 0, 0), ("t0_r1", 0, 1)], [], intr)


def test_self_consistent_network_starts_at_zero(network):
    images = [m for m in network.meta]
    init = initialize_local(images, network.tracks, network.intr)
    assert len(init.tracks) == len(network.tracks)
    sv = bundle._Solver(network.problem(points=init.points), weight_observations(network.problem()))
    assert sv.rms(sv.initial_state()) < 1e-6


@pytest.mark.parametrize("seed", range(8))
def test_jacobians_match_central_differences(seed, distorted):
    rng = np.random.default_rng(seed)
    R = rotvec_to_matrix(rng.normal(size=3))
    C = rng.normal(size=3)
    X = C + R.T @ np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 9)])
    uv = rng.uniform([0, 0], distorted.sensor_size)
    intr = dataclasses.replace(distorted, radial_coeffs=(0.0, 0.0, 0.0), tangential_coeffs=(0.0, 0.0))
    _, Jw, Jc, JX = collinearity_jacobian(R, C, X, intr, uv)
    h = 1e-6
    cases = [
        (Jw, lambda d: collinearity_jacobian(R @ rotvec_to_matrix(d), C, X, intr, uv)[0]),
        (Jc, lambda d: collinearity_jacobian(R, C + d, X, intr, uv)[0]),
        (JX, lambda d: collinearity_jacobian(R, C, X + d, intr, uv)[0]),
    ]
    for J, f in cases:
        num = np.stack([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        assert np.abs(num - J).max() <= 1e-5 * np.abs(J).max()


def test_schur_step_equals_full_solve_every_iteration(small):
    assert len(small.ids) == 6 and len(small.tracks) == 50
    gaps = []

    def check(sv, st, blocks, damping, da):
        full = full_normal_step(*blocks, sv, damping)
        gaps.append(np.linalg.norm(da - full) / np.linalg.norm(full))

    res = solve(small.problem(poses=perturb(small.poses, 2.0)), callback=check)
    assert len(gaps) >= 3
    assert max(gaps) < 1e-9
    assert res.report.rms_after < 1e-8


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_converges_from_two_degree_perturbation(network, seed):
    res = solve(network.problem(poses=perturb(network.poses, 2.0, seed)))
    assert res.report.converged
    assert res.report.rms_after < 1e-8
    # relative orientation is gauge-free; roll about X is fixed only by the penalty
    assert np.abs(relative_rotations(res.poses) - relative_rotations(network.poses)).max() < 1e-8
    ang = roll_about_x(network.points, res.points)
    Q = rotvec_to_matrix(np.array([ang, 0, 0]))
    assert np.abs(res.points - network.points @ Q.T).max() < 1e-7


def test_centers_stay_fixed_exactly(network):
    res = solve(network.problem(poses=perturb(network.poses, 2.0)))
    for before, after in zip(network.poses, res.poses):
        assert np.array_equal(before.center, after.center)
    assert [tuple(p.center) for p in res.poses[::6]] == [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]


def test_accepted_steps_never_raise_cost(noisy):
    res = solve(noisy.problem(poses=perturb(noisy.poses, 2.0)))
    accepted = [r for r in res.report.iterations if r.accepted]
    assert accepted and all(r.candidate_cost < r.cost for r in accepted)
    costs = [r.cost for r in res.report.iterations]
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_missing_gauge_prior_is_detected(network):
    pb = network.problem(poses=perturb(network.poses, 1.0))
    w = weight_observations(pb)
    with pytest.raises(GaugeDeficiencyError):
        solve(pb, weights=Weights(w.pixel, None, w.control))


def test_local_mode_requires_fixed_center(network):
    poses = [p.copy(fixed_position=False) for p in network.poses]
    with pytest.raises(GaugeDeficiencyError):
        network.problem(poses=poses)
    with pytest.raises(InvalidArgumentError):
        network.problem(mode="other")


def test_equal_sigmas_give_identity_weights(network):
    w = weight_observations(network.problem(observation_sigma=0.5))
    assert np.all(w.pixel == 4.0)


def test_roll_initializations_agree_after_gauge(noisy):
    clouds = []
    for deg in (10.0, -10.0):
        Q = rotvec_to_matrix(np.radians([deg, 0, 0]))
        poses = [p.copy(rotation=p.rotation @ Q.T) for p in noisy.poses]
        clouds.append(solve(noisy.problem(poses=poses, points=noisy.points @ Q.T)).points)
    a, b = clouds
    Q = rotvec_to_matrix(np.array([roll_about_x(a, b), 0, 0]))
    assert np.sqrt(np.mean(np.sum((a @ Q.T - b) ** 2, axis=1))) < 1e-6


def test_similarity_leaves_converged_cost_unchanged(noisy):
    first = solve(noisy.problem())
    sim = SimilarityTransform(2.5, rotvec_to_matrix(np.array([0.2, -0.4, 1.1])), np.array([3.0, -1.0, 7.0]))
    poses = [CameraPose(p.rotation @ sim.rotation.T, sim.apply(p.center), True) for p in first.poses]
    base = noisy.problem(points=first.points, poses=first.poses)
    moved = noisy.problem(points=sim.apply(first.points), poses=poses)
    c0 = sum(v**2 for v in cost_breakdown(base).values())
    again = solve(moved)
    c1 = sum(v**2 for v in again.report.cost_breakdown.values())
    assert c1 == pytest.approx(c0, rel=1e-9)


def test_degenerate_track_removed(network):
    tracks = list(network.tracks)
    # a point at near-infinite range has no parallax and a near-singular 3x3 block
    bad = FeatureTrack(len(tracks), [(network.ids[0], np.array([400.0, 600.0])), (network.ids[6], np.array([400.0, 600.0]))], [0, 1])
    pts = np.vstack([network.points, [[0.5, 1e9, 0.0]]])
    res = solve(dataclasses.replace(network.problem(), tracks=tracks + [bad], points=pts))
    assert not res.active[-1]
    assert res.report.removed_tracks == [len(tracks)]


# ----------------------------------------------------------------------------- global mode
def control_for(local, sim, picks, sigma=0.002):
    return [ControlObservation(j, sim.apply(local.points[j]), sigma) for j in picks]


@pytest.fixture(scope="module")
def converged(network):
    pb = network.problem()
    return pb, solve(pb)


def four_sided_picks(points):
    left = np.nonzero(points[:, 1] < -3)[0][:2]
    right = np.nonzero(points[:, 1] > 3)[0][:2]
    return [int(j) for j in np.r_[left, right]]


def test_global_reproduces_known_similarity(converged):
    pb, local = converged
    sim = SimilarityTransform(1.7, rotvec_to_matrix(np.array([0.1, 0.3, -0.2])), np.array([100.0, 20.0, 5.0]))
    picks = four_sided_picks(local.points)
    res = solve_global(local, pb, sim, control_for(local, sim, picks))
    for before, after in zip(local.poses, res.poses):
        assert np.linalg.norm(after.center - sim.apply(before.center)) < 1e-6
        assert np.abs(after.rotation - before.rotation @ sim.rotation.T).max() < 1e-6
    assert res.report.rms_after <= local.report.rms_after + 1e-9
    assert len(res.report.iterations) <= 5


def test_global_with_noise_not_worse_than_local(noisy):
    pb = noisy.problem()
    local = solve(pb)
    sim = SimilarityTransform(1.0, np.eye(3), np.zeros(3))
    res = solve_global(local, pb, sim, control_for(local, sim, four_sided_picks(local.points)))
    assert res.report.rms_after <= local.report.rms_after + 1e-9


def test_doubling_control_sigma_halves_contribution(converged):
    pb, local = converged
    picks = four_sided_picks(local.points)
    rng = np.random.default_rng(0)
    ctrl = [ControlObservation(j, local.points[j] + rng.normal(0, 0.01, 3), 0.002) for j in picks]

    def contrib(scale):
        cs = [ControlObservation(c.track_index, c.point, c.sigma * scale) for c in ctrl]
        gp = AdjustmentProblem(pb.image_ids, [p.copy(fixed_position=False) for p in local.poses], pb.intrinsics,
                               pb.tracks, local.points, mode="global", control=cs)
        return cost_breakdown(gp)["control"]

    assert contrib(2.0) == pytest.approx(contrib(1.0) / 2, rel=1e-12)
