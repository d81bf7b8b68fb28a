"""
Tests for trajectory generation, formation topology and measurement synthesis
"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from geom_core import ContractViolation
from scenario import (FormationConfig, GroundTruth, NoiseConfig, ScenarioConfigError, TrajectoryKind,
                      TrajectoryShape, export_ground_truth, export_measurements, formation_topology,
                      generate_trajectory, initial_guess, path_point, synthesize_measurements, true_ranges)

STRAIGHT = FormationConfig(along_track_offsets=(0.0, 0.0, 0.0, 0.0))


def test_straight_leg_steps_are_speed_times_dt():
    truth = generate_trajectory(TrajectoryKind(), STRAIGHT, 20, 1.0)
    steps = np.linalg.norm(np.diff(truth.positions[:, 0, :], axis=0), axis=-1)
    np.testing.assert_allclose(steps, np.ones(19), atol=1e-12)


def test_lap_closes_after_one_period():
    base = TrajectoryKind()
    kind = TrajectoryKind(speed=base.path_length() / 400.0)
    truth = generate_trajectory(kind, FormationConfig(), 401, 1.0)
    np.testing.assert_allclose(truth.positions[400], truth.positions[0], atol=1e-9)


def test_lateral_offsets_give_cross_track_gaps():
    formation = FormationConfig(lateral_offsets=(-30.0, -10.0, 10.0, 30.0), along_track_offsets=(0.0,) * 4)
    truth = generate_trajectory(TrajectoryKind(), formation, 10, 1.0)
    y = truth.positions[5, :, 1]
    np.testing.assert_allclose(np.diff(y), [20.0, 20.0, 20.0], atol=1e-12)
    np.testing.assert_allclose(truth.positions[5, :, 0], 5.0, atol=1e-12)


def test_dimension_rules():
    with pytest.raises(ScenarioConfigError):
        generate_trajectory(TrajectoryKind(kind="helix"), FormationConfig(), 10, 1.0, d=2)
    with pytest.raises(ScenarioConfigError):
        generate_trajectory(TrajectoryKind(kind="lap"), FormationConfig(), 10, 1.0, d=3)
    helix = generate_trajectory(TrajectoryKind(kind="helix"), FormationConfig(), 10, 1.0)
    assert helix.d == 3
    np.testing.assert_allclose(helix.positions[9, :, 2], -0.9, atol=1e-12)
    with pytest.raises(ContractViolation):
        generate_trajectory(TrajectoryKind(kind="lap"), FormationConfig(), 10, 1.0, d=4)
    with pytest.raises(ContractViolation):
        generate_trajectory(TrajectoryKind(kind="lap"), FormationConfig(), 10, 1.0, current=[float("nan"), 0.0])


def test_invalid_parameters_are_rejected():
    with pytest.raises(ValidationError):
        TrajectoryKind(speed=0.0)
    with pytest.raises(ValidationError):
        FormationConfig(anchor_slots=(1, 2))
    with pytest.raises(ValidationError):
        NoiseConfig(sigma_range=-0.1)
    assert TrajectoryKind(kind="lawnmower").kind == TrajectoryShape.LAWNMOWER


@pytest.mark.parametrize("shape", ["lap", "lawnmower", "helix"])
def test_ground_truth_kinematics_hold(shape):
    current = [0.1, -0.05]
    truth = generate_trajectory(TrajectoryKind(kind=shape), FormationConfig(), 120, 1.0, current=current)
    predicted = truth.positions[:-1] + truth.dt * (truth.rel_velocities[:-1] + truth.current)
    np.testing.assert_allclose(predicted, truth.positions[1:], atol=1e-10)
    np.testing.assert_array_equal(truth.current[:2], current)


def test_dead_reckoning_without_current_reproduces_truth():
    truth = generate_trajectory(TrajectoryKind(kind="lawnmower"), FormationConfig(), 200, 1.0)
    dr = truth.positions[0] + np.concatenate([np.zeros((1, 4, 2)), np.cumsum(truth.rel_velocities[:-1], axis=0)])
    np.testing.assert_allclose(dr, truth.positions, atol=1e-9)


@pytest.mark.parametrize("shape", ["lap", "lawnmower"])
def test_centre_path_is_continuous(shape):
    kind = TrajectoryKind(kind=shape)
    s = np.arange(-20.0, 700.0, 0.25)
    point, tangent = path_point(kind, s)
    gaps = np.linalg.norm(np.diff(point, axis=0), axis=-1)
    assert np.all(gaps <= 0.25 + 1e-9)
    np.testing.assert_allclose(np.linalg.norm(tangent, axis=-1), 1.0, atol=1e-12)


def test_default_formation_topology():
    topo = formation_topology(FormationConfig())
    assert topo.vehicles == (1, 4)
    assert topo.anchors == (2, 3)
    assert topo.edges == ((1, 4),)
    assert topo.links == ((1, 2), (1, 3), (4, 2), (4, 3))

    sparse = formation_topology(FormationConfig(anchor_links={1: [2], 4: [3]}))
    assert sparse.links == ((1, 2), (4, 3))


def test_zero_noise_measurements_are_exact():
    formation = FormationConfig()
    topo = formation_topology(formation)
    truth = generate_trajectory(TrajectoryKind(), formation, 15, 1.0)
    noise = NoiseConfig(sigma_range=0.0, sigma_vel=0.0, sigma_init=0.0)
    stream = synthesize_measurements(truth, topo, noise, seed=4)
    edges, links = true_ranges(truth, topo)
    for t, sample in enumerate(stream):
        np.testing.assert_array_equal(sample.ranges, edges[t])
        np.testing.assert_array_equal(sample.anchor_ranges, links[t])
        np.testing.assert_array_equal(sample.rel_velocities, truth.velocities_of(topo.vehicles)[t])
        np.testing.assert_array_equal(sample.anchor_positions, truth.positions_of(topo.anchors)[t])
    np.testing.assert_array_equal(initial_guess(truth, topo, noise, seed=4), truth.positions_of(topo.vehicles)[0])


def test_same_seed_same_stream():
    formation = FormationConfig()
    topo = formation_topology(formation)
    truth = generate_trajectory(TrajectoryKind(), formation, 10, 1.0)
    a = synthesize_measurements(truth, topo, NoiseConfig(), seed=42)
    b = synthesize_measurements(truth, topo, NoiseConfig(), seed=42)
    c = synthesize_measurements(truth, topo, NoiseConfig(), seed=43)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.ranges, y.ranges)
        np.testing.assert_array_equal(x.rel_velocities, y.rel_velocities)
    assert not np.array_equal(a[0].ranges, c[0].ranges)
    np.testing.assert_array_equal(initial_guess(truth, topo, NoiseConfig(), 42),
                                  initial_guess(truth, topo, NoiseConfig(), 42))


def stationary_truth(ticks, positions):
    positions = np.asarray(positions, dtype=float)
    return GroundTruth(slots=(1, 2, 3, 4), positions=np.broadcast_to(positions, (ticks,) + positions.shape).copy(),
                       rel_velocities=np.zeros((ticks,) + positions.shape), dt=1.0, current=np.zeros(2))


def test_range_noise_has_configured_spread():
    truth = stationary_truth(100_000, [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [40.0, 10.0]])
    topo = formation_topology(FormationConfig())
    stream = synthesize_measurements(truth, topo, NoiseConfig(), seed=8)
    errors = np.array([s.ranges[0] for s in stream]) - np.linalg.norm([40.0, 10.0])
    assert abs(errors.std() - 0.5) <= 0.02 * 0.5


def test_ranges_are_clamped_at_zero():
    truth = stationary_truth(200, [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0], [0.0, 0.0]])
    topo = formation_topology(FormationConfig())
    stream = synthesize_measurements(truth, topo, NoiseConfig(), seed=1)
    ranges = np.array([s.ranges[0] for s in stream])
    assert np.all(ranges >= 0.0)
    assert np.any(ranges == 0.0)


def test_csv_exports(tmp_path):
    formation = FormationConfig()
    topo = formation_topology(formation)
    truth = generate_trajectory(TrajectoryKind(), formation, 5, 1.0)
    stream = synthesize_measurements(truth, topo, NoiseConfig(), seed=0)

    gt = pd.read_csv(export_ground_truth(truth, tmp_path / "truth.csv"))
    assert list(gt.columns) == ["tick", "id", "x", "y", "vx", "vy"]
    assert len(gt) == 5 * 4

    meas = pd.read_csv(export_measurements(stream, topo, tmp_path / "meas.csv"))
    assert list(meas.columns) == ["tick", "kind", "a", "b", "value"]
    per_tick = topo.num_edges + topo.num_links + topo.n * 2
    assert len(meas) == 5 * per_tick
    assert set(meas["kind"]) == {"range", "anchor_range", "velocity"}
