"""
Comparison Methods

A centralized extended Kalman filter over the stacked positions of all
vehicles (relative velocities enter as control inputs, ranges as
measurements), and a static range-only localizer that runs the window
solver on single-sample, velocity-free windows.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np

from diesel import SolveReport, TrackResult, run_window
from geom_core import ContractViolation, DieselError, NetworkTopology
from problem import MeasurementSample, MeasurementWindow, SolverParams, induced_stacked, solver_params

logger = logging.getLogger(__name__)

MIN_PREDICTED_RANGE = 1e-9


class FilterDivergence(DieselError):
    """The filter produced non-finite mean or covariance"""


class ObservabilityError(DieselError):
    """Static problem without anchors: positions are only known up to translation"""


@dataclass
class EkfState:
    """Joint Gaussian belief over all vehicle positions"""
    mean: np.ndarray            # (n * d,)
    covariance: np.ndarray      # (n * d, n * d)
    q: float                    # process noise scale, m^2 per s^2 of dt
    r: float                    # range noise variance, m^2
    d: int

    @classmethod
    def from_guess(cls, positions: np.ndarray, variance: float, q: float, r: float) -> "EkfState":
        positions = np.asarray(positions, dtype=float)
        n, d = positions.shape
        return cls(mean=positions.ravel().copy(), covariance=variance * np.eye(n * d), q=q, r=r, d=d)

    def positions(self) -> np.ndarray:
        return self.mean.reshape(-1, self.d)


def ekf_predict(state: EkfState, rel_velocities: np.ndarray, dt: float) -> EkfState:
    """
    Dead-reckon every vehicle by dt * v^R

    Current and velocity noise are folded into q: the covariance grows by
    q * dt^2 * I.
    """
    v = np.asarray(rel_velocities, dtype=float).ravel()
    if v.shape != state.mean.shape:
        raise ContractViolation(f"velocity shape {v.shape} does not match state {state.mean.shape}")
    cov = state.covariance + state.q * dt ** 2 * np.eye(state.mean.size)
    return replace(state, mean=state.mean + dt * v, covariance=cov)


def ekf_update(state: EkfState, topology: NetworkTopology, ranges: np.ndarray,
               anchor_ranges: np.ndarray, anchor_positions: np.ndarray) -> EkfState:
    """
    Joint first-order update with every range taken at one tick

    Args:
        state: Predicted belief
        topology: Which pairs and anchor links the ranges belong to
        ranges: (E,) vehicle-vehicle ranges
        anchor_ranges: (K,) vehicle-anchor ranges
        anchor_positions: (m, d) anchor positions at the same tick

    Returns:
        Posterior belief; measurements whose predicted range is below 1e-9 m are skipped
    """
    d = state.d
    x = state.positions()
    rows: List[np.ndarray] = []
    innovations: List[float] = []

    for e, (i, j) in enumerate(topology.edges):
        a, b = topology.vehicle_index[i], topology.vehicle_index[j]
        delta = x[a] - x[b]
        h = float(np.linalg.norm(delta))
        if h < MIN_PREDICTED_RANGE:
            continue
        row = np.zeros(state.mean.size)
        row[a * d:(a + 1) * d] = delta / h
        row[b * d:(b + 1) * d] = -delta / h
        rows.append(row)
        innovations.append(float(ranges[e]) - h)

    for l, (v, k) in enumerate(topology.links):
        a = topology.vehicle_index[v]
        delta = x[a] - np.asarray(anchor_positions, dtype=float)[topology.anchor_index[k]]
        h = float(np.linalg.norm(delta))
        if h < MIN_PREDICTED_RANGE:
            continue
        row = np.zeros(state.mean.size)
        row[a * d:(a + 1) * d] = delta / h
        rows.append(row)
        innovations.append(float(anchor_ranges[l]) - h)

    if not rows:
        return replace(state, mean=state.mean.copy(), covariance=state.covariance.copy())

    H = np.array(rows)
    nu = np.array(innovations)
    P = state.covariance
    S = H @ P @ H.T + state.r * np.eye(len(rows))
    try:
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as e:
        raise FilterDivergence(f"innovation covariance is singular: {e}")
    mean = state.mean + K @ nu
    I_KH = np.eye(P.shape[0]) - K @ H
    cov = I_KH @ P @ I_KH.T + state.r * K @ K.T
    cov = 0.5 * (cov + cov.T)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise FilterDivergence("EKF update produced non-finite values")
    return replace(state, mean=mean, covariance=cov)


class CentralizedEkf:
    """Runs predict/update over a measurement stream"""

    def __init__(self, topology: NetworkTopology, initial_guess: np.ndarray, dt: float,
                 q: float, r: float, initial_variance: float):
        self.topology = topology
        self.dt = dt
        self.state = EkfState.from_guess(initial_guess, max(initial_variance, 1e-12), q, r)
        self._last_velocities: Optional[np.ndarray] = None

    def step(self, sample: Optional[MeasurementSample]) -> np.ndarray:
        if sample is None:
            # predict only; the last velocities are held until a sample brings new ones
            if self._last_velocities is not None:
                self.state = ekf_predict(self.state, self._last_velocities, self.dt)
            return self.state.positions().copy()
        if self._last_velocities is not None:
            self.state = ekf_predict(self.state, self._last_velocities, self.dt)
        self.state = ekf_update(self.state, self.topology, sample.ranges, sample.anchor_ranges,
                                sample.anchor_positions)
        self._last_velocities = np.asarray(sample.rel_velocities, dtype=float)
        return self.state.positions().copy()


def run_ekf(stream: Iterable[Optional[MeasurementSample]], topology: NetworkTopology,
            initial_guess: np.ndarray, dt: float, q: float, r: float,
            initial_variance: float) -> np.ndarray:
    """Per-tick EKF position estimates, shape (T, n, d)"""
    ekf = CentralizedEkf(topology, initial_guess, dt, q, r, initial_variance)
    return np.array([ekf.step(sample) for sample in stream])


@dataclass
class StaticProblem:
    """Ranges and anchor positions of a single tick, no velocities"""
    topology: NetworkTopology
    ranges: np.ndarray
    anchor_ranges: np.ndarray
    anchor_positions: np.ndarray
    tick: int = 0

    @classmethod
    def from_sample(cls, topology: NetworkTopology, sample: MeasurementSample) -> "StaticProblem":
        return cls(topology=topology, ranges=sample.ranges, anchor_ranges=sample.anchor_ranges,
                   anchor_positions=sample.anchor_positions, tick=sample.tick)

    def as_window(self, dt: float = 1.0) -> MeasurementWindow:
        """The one-sample window with every velocity term set to zero"""
        topo = self.topology
        anchors = np.asarray(self.anchor_positions, dtype=float).reshape(topo.m, -1)
        d = anchors.shape[1]
        return MeasurementWindow(
            topology=topo, dt=dt,
            ranges=np.asarray(self.ranges, dtype=float).reshape(topo.num_edges, 1),
            anchor_ranges=np.asarray(self.anchor_ranges, dtype=float).reshape(topo.num_links, 1),
            rel_velocities=np.zeros((topo.n, 1, d)),
            anchor_base=anchors,
            anchor_velocity=np.zeros((topo.m, 1, d)),
            first_tick=self.tick,
        )


def static_localize(problem: StaticProblem, init: np.ndarray,
                    params: Optional[SolverParams] = None, dt: float = 1.0
                    ) -> Tuple[np.ndarray, SolveReport]:
    """
    Range-only positions for one tick

    Args:
        problem: Ranges and anchor positions of the tick
        init: Starting positions, shape (n, d)
        params: Solver parameters for W = 1 (built from the topology if None)
        dt: Sampling interval (only used to build the degenerate window)

    Returns:
        Estimated positions (n, d) and the solve report
    """
    topo = problem.topology
    if topo.num_links == 0:
        raise ObservabilityError("static localization needs at least one anchor link")
    window = problem.as_window(dt)
    params = solver_params(topo, 1) if params is None else params
    z0 = induced_stacked(init, window, tie_break=params.tie_break)
    z, report = run_window(topo, window, z0, params)
    return z.p.copy(), report


def static_track(stream: Iterable[Optional[MeasurementSample]], topology: NetworkTopology,
                 initial_guess: np.ndarray, dt: float, max_iters: int, rel_tol: float,
                 tie_break: Optional[np.ndarray] = None) -> TrackResult:
    """Static localization at every tick, warm-started from the previous tick's estimate"""
    params = solver_params(topology, 1, max_iters, rel_tol, tie_break=tie_break)
    current = np.asarray(initial_guess, dtype=float).copy()
    n, d = current.shape
    estimates, iterations, costs, reasons, skipped = [], [], [], [], []
    for t, sample in enumerate(stream):
        if sample is None:
            logger.warning(f"static localizer: stream gap at tick {t}")
            skipped.append(t)
            estimates.append(np.full((n, d), np.nan))
            iterations.append(0)
            costs.append(np.nan)
            reasons.append(None)
            continue
        current, report = static_localize(StaticProblem.from_sample(topology, sample), current, params, dt)
        estimates.append(current.copy())
        iterations.append(report.iterations)
        costs.append(report.final_cost)
        reasons.append(report.stop_reason)
    return TrackResult(estimates=np.array(estimates).reshape(len(estimates), n, d),
                       iterations=np.array(iterations, dtype=int),
                       final_costs=np.array(costs, dtype=float), stop_reasons=reasons,
                       skipped_ticks=skipped)
