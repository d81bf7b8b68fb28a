"""
Dense Oracle Checks

Random small instances and the checks that compare the matrix-free,
distributed machinery against dense linear algebra: one synchronous
round vs one dense projected-gradient step, the gradient vs finite
differences, the range misfit vs the stacked cost, and the step
constant vs the power-iteration estimate of lambda_max(M).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from diesel import RoundEngine, StackedRoundEngine, centralized_reference_step
from geom_core import NetworkTopology, space_dim
from problem import (
    MeasurementWindow,
    StackedVariable,
    cost_original,
    cost_stacked,
    estimate_lambda_max,
    gradient,
    induced_stacked,
    lipschitz_bound,
    project_constraints,
    reconstruct_positions,
    solver_params,
    t0_lipschitz_bound,
    window_deltas,
)

logger = logging.getLogger(__name__)


@dataclass
class OracleInstance:
    topology: NetworkTopology
    window: MeasurementWindow
    z: StackedVariable


@dataclass
class SpectralCheck:
    """lambda_max(M) against the W-sample bound and the W - 1 sample count"""
    n: int
    W: int
    lambda_max: float
    bound: float
    t0_bound: float

    @property
    def bound_holds(self) -> bool:
        return self.lambda_max <= self.bound

    @property
    def t0_bound_holds(self) -> bool:
        return self.lambda_max <= self.t0_bound


@dataclass
class OracleReport:
    round_max_abs_diff: List[float] = field(default_factory=list)
    stacked_max_abs_diff: List[float] = field(default_factory=list)
    gradient_rel_error: List[float] = field(default_factory=list)
    formulation_rel_diff: List[float] = field(default_factory=list)
    spectral: List[SpectralCheck] = field(default_factory=list)

    def passed(self, round_tol: float = 1e-12, stacked_tol: float = 1e-10, grad_tol: float = 1e-6,
               cost_tol: float = 1e-10) -> bool:
        return (max(self.round_max_abs_diff, default=0.0) <= round_tol
                and max(self.stacked_max_abs_diff, default=0.0) <= stacked_tol
                and max(self.gradient_rel_error, default=0.0) <= grad_tol
                and max(self.formulation_rel_diff, default=0.0) <= cost_tol
                and all(s.bound_holds for s in self.spectral))


def random_topology(rng: np.random.Generator, n: int, m: int) -> NetworkTopology:
    """Connected random graph on vehicles 1..n, anchors n+1..n+m, each anchor linked to someone"""
    vehicles = list(range(1, n + 1))
    anchors = list(range(n + 1, n + m + 1))
    edges = set()
    for v in vehicles[1:]:
        u = int(rng.integers(1, v))
        edges.add((u, v))
    extra = int(rng.integers(0, n))
    for _ in range(extra):
        i, j = sorted(int(x) for x in rng.choice(vehicles, size=2, replace=False))
        edges.add((i, j))
    links = {}
    for k in anchors:
        owners = rng.choice(vehicles, size=int(rng.integers(1, n + 1)), replace=False)
        for v in sorted(int(o) for o in owners):
            links.setdefault(v, []).append(k)
    return NetworkTopology(vehicles=tuple(vehicles), anchors=tuple(anchors),
                           edges=tuple(sorted(edges)), anchor_links=links)


def random_instance(rng: np.random.Generator, max_vehicles: int = 8, max_anchors: int = 2,
                    max_window: int = 6, d: int = 2) -> OracleInstance:
    """
    Random topology, window and (unprojected) stacked variable

    Ranges are distances of a random geometry perturbed by noise, so the
    instance is close to, but not exactly, consistent.
    """
    n = int(rng.integers(2, max_vehicles + 1))
    m = int(rng.integers(1, max_anchors + 1))
    W = int(rng.integers(1, max_window + 1))
    topo = random_topology(rng, n, m)
    dt = 1.0

    start = rng.uniform(-50.0, 50.0, size=(n, d))
    rel_vel = rng.normal(0.0, 1.0, size=(n, W, d))
    anchor_base = rng.uniform(-50.0, 50.0, size=(m, d))
    anchor_step = rng.normal(0.0, 1.0, size=(m, W, d))
    anchor_vel = np.zeros((m, W, d))
    anchor_vel[:, 1:, :] = np.cumsum(anchor_step[:, :-1, :], axis=1)

    cum = np.zeros((n, W, d))
    cum[:, 1:, :] = np.cumsum(rel_vel[:, :-1, :], axis=1)
    x = start[:, None, :] + cum * dt
    a = anchor_base[:, None, :] + anchor_vel * dt
    lo, hi = topo.edge_endpoint_indices()
    veh, anc = topo.link_indices()
    ranges = np.abs(np.linalg.norm(x[lo] - x[hi], axis=-1) + rng.normal(0.0, 0.5, size=(len(lo), W)))
    anchor_ranges = np.abs(np.linalg.norm(x[veh] - a[anc], axis=-1) + rng.normal(0.0, 0.5, size=(len(veh), W)))

    window = MeasurementWindow(topology=topo, dt=dt, ranges=ranges.reshape(topo.num_edges, W),
                               anchor_ranges=anchor_ranges.reshape(topo.num_links, W),
                               rel_velocities=rel_vel, anchor_base=anchor_base,
                               anchor_velocity=anchor_vel)
    z = StackedVariable(p=start + rng.normal(0.0, 5.0, size=(n, d)),
                        y=rng.normal(0.0, 10.0, size=(topo.num_edges, W, d)),
                        w=rng.normal(0.0, 10.0, size=(topo.num_links, W, d)))
    return OracleInstance(topology=topo, window=window, z=z)


def round_vs_dense(instance: OracleInstance) -> float:
    """Max abs difference between one distributed round and one dense projected-gradient step"""
    topo, window = instance.topology, instance.window
    params = solver_params(topo, window.W)
    z0 = project_constraints(instance.z, window)
    engine = RoundEngine(window, params)
    engine.start(z0)
    engine.step()
    distributed = engine.assemble()
    dense = centralized_reference_step(z0, window, topo, params.lipschitz)
    return float(np.max(np.abs(distributed.flatten() - dense.flatten())))


def stacked_vs_dense(instance: OracleInstance) -> float:
    """Max abs difference between one stacked round and one dense projected-gradient step"""
    topo, window = instance.topology, instance.window
    params = solver_params(topo, window.W)
    z0 = project_constraints(instance.z, window)
    engine = StackedRoundEngine(window, params)
    engine.start(z0)
    engine.step()
    dense = centralized_reference_step(z0, window, topo, params.lipschitz)
    return float(np.max(np.abs(engine.assemble().flatten() - dense.flatten())))


def gradient_vs_finite_differences(instance: OracleInstance, h: float = 1e-4) -> float:
    """Relative error of the matrix-free gradient against central differences"""
    deltas = window_deltas(instance.window)
    z = instance.z
    flat = z.flatten()
    numeric = np.zeros_like(flat)
    for k in range(flat.size):
        step = np.zeros_like(flat)
        step[k] = h
        numeric[k] = (cost_stacked(z.unflatten(flat + step), deltas)
                      - cost_stacked(z.unflatten(flat - step), deltas)) / (2 * h)
    analytic = gradient(z, deltas).flatten()
    return float(np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12))


def formulation_gap(instance: OracleInstance) -> float:
    """Relative difference between the range misfit and the stacked cost at the induced z"""
    window = instance.window
    x = reconstruct_positions(instance.z.p, window)
    original = cost_original(x, window)
    stacked = cost_stacked(induced_stacked(instance.z.p, window), window_deltas(window))
    return abs(original - stacked) / max(abs(original), 1.0)


def spectral_check(topology: NetworkTopology, W: int, d: int = 2) -> SpectralCheck:
    lam = estimate_lambda_max(topology, W, d)
    check = SpectralCheck(n=topology.n, W=W, lambda_max=lam, bound=lipschitz_bound(topology, W),
                          t0_bound=t0_lipschitz_bound(topology, W))
    if not check.t0_bound_holds:
        logger.info(f"Bound counted with W-1 samples undershoots: n={topology.n}, W={W}, "
                    f"lambda_max={lam:.6g} > {check.t0_bound:.6g}")
    if not check.bound_holds:
        logger.error(f"Step bound violated: n={topology.n}, W={W}, lambda_max={lam:.6g} > {check.bound:.6g}")
    return check


def run_oracle_suite(instances: int = 20, seed: int = 0, d: int = 2,
                     rng: Optional[np.random.Generator] = None) -> OracleReport:
    """Run every oracle check on `instances` random instances"""
    d = space_dim(d)
    rng = np.random.Generator(np.random.Philox(seed)) if rng is None else rng
    report = OracleReport()
    for k in range(instances):
        inst = random_instance(rng, d=d)
        report.round_max_abs_diff.append(round_vs_dense(inst))
        report.stacked_max_abs_diff.append(stacked_vs_dense(inst))
        report.gradient_rel_error.append(gradient_vs_finite_differences(inst))
        report.formulation_rel_diff.append(formulation_gap(inst))
        report.spectral.append(spectral_check(inst.topology, inst.window.W, d))
        logger.debug(f"oracle instance {k}: n={inst.topology.n}, E={inst.topology.num_edges}, "
                     f"K={inst.topology.num_links}, W={inst.window.W}")
    logger.info(f"Oracle suite on {instances} instances: "
                f"round diff {max(report.round_max_abs_diff):.3g}, "
                f"gradient err {max(report.gradient_rel_error):.3g}, "
                f"cost gap {max(report.formulation_rel_diff):.3g}")
    return report
