"""
Shared fixtures for the benchmark tests
"""

import numpy as np
import pytest

from experiment_config import ExperimentConfig
from geom_core import NetworkTopology, chain_topology
from problem import MeasurementWindow


def build_window(topology: NetworkTopology, start: np.ndarray, rel_velocities: np.ndarray,
                 anchor_track: np.ndarray, dt: float = 1.0, range_noise: float = 0.0,
                 rng: np.random.Generator = None) -> MeasurementWindow:
    """Window whose ranges come from the trajectory x = start + cumulative velocity * dt"""
    n, W, d = rel_velocities.shape
    cum = np.zeros_like(rel_velocities)
    cum[:, 1:, :] = np.cumsum(rel_velocities[:, :-1, :], axis=1)
    x = start[:, None, :] + cum * dt
    lo, hi = topology.edge_endpoint_indices()
    veh, anc = topology.link_indices()
    ranges = np.linalg.norm(x[lo] - x[hi], axis=-1).reshape(topology.num_edges, W)
    anchor_ranges = np.linalg.norm(x[veh] - anchor_track[anc], axis=-1).reshape(topology.num_links, W)
    if range_noise > 0:
        ranges = np.abs(ranges + rng.normal(0.0, range_noise, ranges.shape))
        anchor_ranges = np.abs(anchor_ranges + rng.normal(0.0, range_noise, anchor_ranges.shape))
    base = anchor_track[:, 0, :]
    return MeasurementWindow(topology=topology, dt=dt, ranges=ranges, anchor_ranges=anchor_ranges,
                             rel_velocities=rel_velocities, anchor_base=base,
                             anchor_velocity=(anchor_track - base[:, None, :]) / dt)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def chain4():
    """Vehicles 1-2-3-4 in a path, vehicle 1 and 4 each linked to one anchor"""
    return chain_topology(4, anchor_links={1: (10,), 4: (11,)}, anchors=(10, 11))


@pytest.fixture
def window_builder():
    return build_window


@pytest.fixture
def noisy_window(chain4, rng):
    """W = 6 planar window with noisy ranges over the chain"""
    n, W, d = chain4.n, 6, 2
    start = rng.uniform(-40.0, 40.0, size=(n, d))
    vel = rng.normal(0.0, 1.0, size=(n, W, d))
    anchors = rng.uniform(-40.0, 40.0, size=(chain4.m, 1, d)) + np.zeros((chain4.m, W, d))
    return build_window(chain4, start, vel, anchors, range_noise=0.5, rng=rng)


@pytest.fixture
def small_config(tmp_path):
    """A short, cheap experiment"""
    return ExperimentConfig.model_validate({
        "trials": 2,
        "duration_ticks": 30,
        "output_dir": str(tmp_path / "results"),
        "solver": {"max_iters": 50},
        "ekf": {"q_grid": [0.001, 0.01], "r_grid": [0.25]},
    })
