"""
Tests for the EKF and static range-only baselines
"""

import numpy as np
import pytest

from baselines import (CentralizedEkf, EkfState, FilterDivergence, ObservabilityError, StaticProblem,
                       ekf_predict, ekf_update, static_localize, static_track)
from diesel import TrackingParams, track
from geom_core import NetworkTopology, chain_topology
from problem import MeasurementSample, solver_params
from scenario import (FormationConfig, NoiseConfig, TrajectoryKind, formation_topology, generate_trajectory,
                      synthesize_measurements)


def anchored_pair():
    return NetworkTopology(vehicles=(1, 2), anchors=(3,), edges=((1, 2),), anchor_links={1: (3,), 2: (3,)})


def test_predict_with_zero_velocity_only_inflates_covariance():
    state = EkfState.from_guess(np.array([[1.0, 2.0], [3.0, 4.0]]), 1.0, q=0.5, r=0.25)
    out = ekf_predict(state, np.zeros((2, 2)), 2.0)
    np.testing.assert_array_equal(out.mean, state.mean)
    np.testing.assert_allclose(out.covariance, state.covariance + 0.5 * 4.0 * np.eye(4))


def test_predict_moves_mean_by_dt_times_velocity():
    state = EkfState.from_guess(np.zeros((1, 2)), 1.0, q=0.1, r=0.25)
    out = ekf_predict(state, np.array([[1.0, 0.0]]), 1.0)
    np.testing.assert_allclose(out.mean, [1.0, 0.0])


def test_predict_forward_and_back_returns_mean():
    state = EkfState.from_guess(np.array([[5.0, -2.0]]), 1.0, q=0.1, r=0.25)
    v = np.array([[0.7, -1.3]])
    out = ekf_predict(ekf_predict(state, v, 1.0), -v, 1.0)
    np.testing.assert_allclose(out.mean, state.mean, atol=1e-12)
    np.testing.assert_allclose(out.covariance, state.covariance + 2 * 0.1 * np.eye(2))


def test_update_with_zero_innovation_keeps_mean():
    topo = anchored_pair()
    x = np.array([[0.0, 0.0], [6.0, 8.0]])
    anchors = np.array([[3.0, -4.0]])
    state = EkfState.from_guess(x, 4.0, q=0.1, r=0.25)
    ranges = np.array([10.0])
    anchor_ranges = np.linalg.norm(x - anchors[0], axis=1)
    out = ekf_update(state, topo, ranges, anchor_ranges, anchors)
    np.testing.assert_allclose(out.mean, state.mean, atol=1e-12)
    assert np.trace(out.covariance) < np.trace(state.covariance)


def test_update_scalar_hand_example():
    topo = NetworkTopology(vehicles=(1,), anchors=(2,), edges=(), anchor_links={1: (2,)})
    state = EkfState.from_guess(np.array([[0.0]]), 100.0, q=0.0, r=1.0)
    out = ekf_update(state, topo, np.zeros(0), np.array([9.0]), np.array([[10.0]]))
    assert 0.0 < out.mean[0] < 1.0
    assert out.mean[0] == pytest.approx(100.0 / 101.0)


def test_update_skips_singular_measurements():
    topo = chain_topology(2)
    state = EkfState.from_guess(np.array([[1.0, 1.0], [1.0, 1.0]]), 1.0, q=0.1, r=0.25)
    out = ekf_update(state, topo, np.array([5.0]), np.zeros(0), np.zeros((0, 2)))
    np.testing.assert_array_equal(out.mean, state.mean)
    np.testing.assert_array_equal(out.covariance, state.covariance)


def test_update_non_finite_is_divergence():
    topo = anchored_pair()
    state = EkfState.from_guess(np.array([[0.0, 0.0], [6.0, 8.0]]), 1.0, q=0.1, r=np.nan)
    with pytest.raises(FilterDivergence):
        ekf_update(state, topo, np.array([9.0]), np.array([4.0, 9.0]), np.array([[3.0, -4.0]]))


def test_covariance_stays_symmetric_psd_over_long_run():
    formation = FormationConfig()
    topo = formation_topology(formation)
    truth = generate_trajectory(TrajectoryKind(), formation, 1000, 1.0)
    stream = synthesize_measurements(truth, topo, NoiseConfig(), seed=3)
    ekf = CentralizedEkf(topo, truth.positions_of(topo.vehicles)[0], 1.0, q=0.01, r=0.25, initial_variance=4.0)
    for t, sample in enumerate(stream):
        ekf.step(sample)
        if t % 100 == 99:
            cov = ekf.state.covariance
            np.testing.assert_array_equal(cov, cov.T)
            assert np.min(np.linalg.eigvalsh(cov)) >= -1e-9


def test_static_localize_noiseless_truth_is_fixed(chain4):
    positions = np.array([[0.0, 0.0], [10.0, 2.0], [20.0, -3.0], [31.0, 1.0]])
    anchors = np.array([[-5.0, 12.0], [35.0, 15.0]])
    lo, hi = chain4.edge_endpoint_indices()
    veh, anc = chain4.link_indices()
    problem = StaticProblem(topology=chain4, ranges=np.linalg.norm(positions[lo] - positions[hi], axis=1),
                            anchor_ranges=np.linalg.norm(positions[veh] - anchors[anc], axis=1),
                            anchor_positions=anchors)
    estimate, report = static_localize(problem, positions)
    np.testing.assert_allclose(estimate, positions, atol=1e-9)
    assert report.stop_reason == "tolerance"


def test_static_step_constant(chain4):
    assert solver_params(chain4, 1).lipschitz == 7.0


def test_static_localize_needs_anchors():
    problem = StaticProblem(topology=chain_topology(3), ranges=np.array([1.0, 1.0]), anchor_ranges=np.zeros(0),
                            anchor_positions=np.zeros((0, 2)))
    with pytest.raises(ObservabilityError):
        static_localize(problem, np.zeros((3, 2)))


def test_static_track_is_diesel_with_one_sample_and_no_velocities():
    formation = FormationConfig()
    topo = formation_topology(formation)
    truth = generate_trajectory(TrajectoryKind(), formation, 12, 1.0)
    stream = synthesize_measurements(truth, topo, NoiseConfig(), seed=21)
    stream = [MeasurementSample(tick=s.tick, ranges=s.ranges, anchor_ranges=s.anchor_ranges,
                                rel_velocities=np.zeros_like(s.rel_velocities), anchor_positions=s.anchor_positions)
              for s in stream]
    init = truth.positions_of(topo.vehicles)[0] + 1.5

    static = static_track(stream, topo, init, 1.0, max_iters=200, rel_tol=1e-6)
    windowed = track(stream, topo, TrackingParams(window_len=0, max_iters=200, rel_tol=1e-6), init, 1.0)
    np.testing.assert_array_equal(static.estimates, windowed.estimates)
    np.testing.assert_array_equal(static.iterations, windowed.iterations)


def test_ekf_dead_reckons_through_a_stream_gap():
    topo = anchored_pair()
    start = np.array([[0.0, 0.0], [6.0, 8.0]])
    velocity = np.array([[1.0, 0.5], [0.5, -1.0]])
    anchor = np.array([[3.0, -4.0]])
    lo, hi = topo.edge_endpoint_indices()
    veh, anc = topo.link_indices()
    ekf = CentralizedEkf(topo, start, 1.0, q=0.01, r=0.25, initial_variance=1.0)
    for t in range(12):
        x = start + t * velocity
        if t == 5:
            before = np.trace(ekf.state.covariance)
            estimate = ekf.step(None)
            assert np.trace(ekf.state.covariance) > before
        else:
            sample = MeasurementSample(tick=t, ranges=np.linalg.norm(x[lo] - x[hi], axis=-1),
                                       anchor_ranges=np.linalg.norm(x[veh] - anchor[anc], axis=-1),
                                       rel_velocities=velocity, anchor_positions=anchor)
            estimate = ekf.step(sample)
        np.testing.assert_allclose(estimate, x, atol=1e-9)


def test_ekf_gap_before_any_velocity_keeps_the_guess():
    start = np.array([[0.0, 0.0], [6.0, 8.0]])
    ekf = CentralizedEkf(anchored_pair(), start, 1.0, q=0.01, r=0.25, initial_variance=1.0)
    np.testing.assert_array_equal(ekf.step(None), start)
    np.testing.assert_array_equal(ekf.state.covariance, np.eye(4))
