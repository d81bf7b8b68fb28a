"""
Windowed Estimation Problem

Builds the per-window localization problem: the range misfit over the
window, its reformulation as a quadratic in the stacked variable
z = (p, y, w) with sphere constraints on y and w, the gradient of that
quadratic, the projection onto the constraint set and the step constant.

All operators are matrix-free. Arrays are laid out as:

    p      (n, d)      vehicle positions at the first window sample
    y      (E, W, d)   edge variables, oriented from the +1 endpoint
    w      (K, W, d)   anchor-link variables
    ranges (E, W), anchor_ranges (K, W)

where rows follow the topology's vehicle, edge and link ordering.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from geom_core import ContractViolation, DieselError, NetworkTopology, as_vec, unit_vec

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 200
DEFAULT_REL_TOL = 1e-6
UNIT_TOL = 1e-12


class ParameterError(DieselError, ValueError):
    """Solver parameters that cannot give a valid projected-gradient step"""


def checked_tie_break(tie_break: Optional[Sequence[float]], d: int) -> np.ndarray:
    """Finite unit vector used to project zero blocks; e1 when None"""
    if tie_break is None:
        return unit_vec(d)
    tb = as_vec(tie_break, d)
    if abs(float(np.linalg.norm(tb)) - 1.0) > UNIT_TOL:
        raise ParameterError(f"tie-break must be a unit vector, got {tb} with norm {np.linalg.norm(tb):.6g}")
    return tb


@dataclass
class MeasurementSample:
    """Everything measured at one tick"""
    tick: int
    ranges: np.ndarray             # (E,) one value per unordered edge
    anchor_ranges: np.ndarray      # (K,) one value per anchor link
    rel_velocities: np.ndarray     # (n, d) water-relative velocity per vehicle
    anchor_positions: np.ndarray   # (m, d) GPS-referenced anchor positions


@dataclass
class MeasurementWindow:
    """Ranges, relative velocities and anchor tracks for W consecutive samples"""
    topology: NetworkTopology
    dt: float
    ranges: np.ndarray
    anchor_ranges: np.ndarray
    rel_velocities: np.ndarray
    anchor_base: np.ndarray
    anchor_velocity: np.ndarray
    first_tick: int = 0

    def __post_init__(self):
        topo = self.topology
        self.ranges = np.asarray(self.ranges, dtype=float)
        self.anchor_ranges = np.asarray(self.anchor_ranges, dtype=float)
        self.rel_velocities = np.asarray(self.rel_velocities, dtype=float)
        self.anchor_base = np.asarray(self.anchor_base, dtype=float)
        self.anchor_velocity = np.asarray(self.anchor_velocity, dtype=float)

        if self.rel_velocities.ndim != 3 or self.rel_velocities.shape[0] != topo.n:
            raise ContractViolation(
                f"rel_velocities must be (n={topo.n}, W, d), got {self.rel_velocities.shape}")
        _, W, d = self.rel_velocities.shape
        if W < 1 or d < 1:
            raise ContractViolation(f"window needs W >= 1 and d >= 1, got W={W}, d={d}")
        if self.dt <= 0:
            raise ContractViolation(f"sampling interval must be positive, got {self.dt}")
        if self.ranges.shape != (topo.num_edges, W):
            raise ContractViolation(
                f"ranges must be (E={topo.num_edges}, W={W}), got {self.ranges.shape}")
        if self.anchor_ranges.shape != (topo.num_links, W):
            raise ContractViolation(
                f"anchor_ranges must be (K={topo.num_links}, W={W}), got {self.anchor_ranges.shape}")
        if self.anchor_base.shape != (topo.m, d):
            raise ContractViolation(f"anchor_base must be (m={topo.m}, d={d}), got {self.anchor_base.shape}")
        if self.anchor_velocity.shape != (topo.m, W, d):
            raise ContractViolation(
                f"anchor_velocity must be (m={topo.m}, W={W}, d={d}), got {self.anchor_velocity.shape}")
        for name in ("ranges", "anchor_ranges", "rel_velocities", "anchor_base", "anchor_velocity"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"window field {name} has non-finite entries")
        if np.any(self.ranges < 0) or np.any(self.anchor_ranges < 0):
            raise ContractViolation("ranges must be nonnegative")

    @property
    def W(self) -> int:
        return self.rel_velocities.shape[1]

    @property
    def d(self) -> int:
        return self.rel_velocities.shape[2]

    def anchor_positions(self) -> np.ndarray:
        """a_k(tau) = q_k + u_k(tau) * dt, shape (m, W, d)"""
        return self.anchor_base[:, None, :] + self.anchor_velocity * self.dt

    @classmethod
    def from_samples(cls, topology: NetworkTopology, samples: Sequence[MeasurementSample],
                     dt: float) -> "MeasurementWindow":
        """
        Assemble a window from consecutive samples

        The anchor track is split as base position (first sample) plus a
        cumulative velocity term so that a_k(tau) = q_k + u_k(tau) * dt.
        """
        if not samples:
            raise ContractViolation("cannot build a window from zero samples")
        ranges = np.stack([s.ranges for s in samples], axis=1).reshape(topology.num_edges, len(samples))
        anchor_ranges = np.stack([s.anchor_ranges for s in samples], axis=1).reshape(
            topology.num_links, len(samples))
        rel_velocities = np.stack([s.rel_velocities for s in samples], axis=1)
        anchors = np.stack([s.anchor_positions for s in samples], axis=1)
        base = anchors[:, 0, :]
        return cls(topology=topology, dt=dt, ranges=ranges, anchor_ranges=anchor_ranges,
                   rel_velocities=rel_velocities, anchor_base=base,
                   anchor_velocity=(anchors - base[:, None, :]) / dt,
                   first_tick=samples[0].tick)


@dataclass
class WindowDeltas:
    """Known offsets of the stacked residuals: dv per edge sample, alpha per link sample"""
    topology: NetworkTopology
    dv: np.ndarray      # (E, W, d)
    alpha: np.ndarray   # (K, W, d)


@dataclass
class StackedVariable:
    """Optimization variable z = (p, y, w) over one window"""
    p: np.ndarray
    y: np.ndarray
    w: np.ndarray

    @classmethod
    def zeros(cls, topology: NetworkTopology, W: int, d: int) -> "StackedVariable":
        return cls(p=np.zeros((topology.n, d)), y=np.zeros((topology.num_edges, W, d)),
                   w=np.zeros((topology.num_links, W, d)))

    def copy(self) -> "StackedVariable":
        return StackedVariable(self.p.copy(), self.y.copy(), self.w.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.p.ravel(), self.y.ravel(), self.w.ravel()])

    def unflatten(self, vec: np.ndarray) -> "StackedVariable":
        """New variable shaped like self with entries taken from vec"""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ContractViolation(f"expected {self.size} entries, got {vec.size}")
        a, b = self.p.size, self.p.size + self.y.size
        return StackedVariable(vec[:a].reshape(self.p.shape), vec[a:b].reshape(self.y.shape),
                               vec[b:].reshape(self.w.shape))

    @property
    def size(self) -> int:
        return self.p.size + self.y.size + self.w.size

    def distance(self, other: "StackedVariable") -> float:
        return float(np.sqrt(np.sum((self.p - other.p) ** 2) + np.sum((self.y - other.y) ** 2)
                             + np.sum((self.w - other.w) ** 2)))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.p ** 2) + np.sum(self.y ** 2) + np.sum(self.w ** 2)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.y))
                    and np.all(np.isfinite(self.w)))

    def check_shape(self, topology: NetworkTopology, W: int, d: int):
        if (self.p.shape != (topology.n, d) or self.y.shape != (topology.num_edges, W, d)
                or self.w.shape != (topology.num_links, W, d)):
            raise ContractViolation(
                f"stacked variable shapes p{self.p.shape} y{self.y.shape} w{self.w.shape} "
                f"do not match n={topology.n}, E={topology.num_edges}, K={topology.num_links}, "
                f"W={W}, d={d}")


@dataclass
class SolverParams:
    """Step constant, per-vehicle p-update coefficients and stopping budget"""
    lipschitz: float
    beta: np.ndarray
    max_iters: int = DEFAULT_MAX_ITERS
    rel_tol: float = DEFAULT_REL_TOL
    tie_break: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not self.lipschitz > 0:
            raise ParameterError(f"Lipschitz constant must be positive, got {self.lipschitz}")
        if np.any(self.beta <= 0) or np.any(self.beta > 1):
            raise ParameterError(f"beta coefficients must lie in (0, 1], got {self.beta}")
        if not self.rel_tol > 0:
            raise ParameterError(f"rel_tol must be positive, got {self.rel_tol}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be at least 1, got {self.max_iters}")
        if self.tie_break is not None:
            self.tie_break = checked_tie_break(self.tie_break, np.size(self.tie_break))

    def tie_break_for(self, d: int) -> np.ndarray:
        return checked_tie_break(self.tie_break, d)


def cumulative_velocities(window: MeasurementWindow) -> np.ndarray:
    """
    Running sum of relative velocities inside the window

    v_i at the first sample is zero and v_i(tau + 1) - v_i(tau) = v_i^R(tau),
    so the reconstructed position is x_i(tau) = p_i + v_i(tau) * dt.

    Returns:
        Array of shape (n, W, d)
    """
    vr = window.rel_velocities
    out = np.zeros_like(vr)
    if window.W > 1:
        out[:, 1:, :] = np.cumsum(vr[:, :-1, :], axis=1)
    return out


def reconstruct_positions(p: np.ndarray, window: MeasurementWindow,
                          cumulative: Optional[np.ndarray] = None) -> np.ndarray:
    """Window trajectory x_i(tau) = p_i + v_i(tau) * dt, shape (n, W, d)"""
    v = cumulative_velocities(window) if cumulative is None else cumulative
    return np.asarray(p, dtype=float)[:, None, :] + v * window.dt


def cost_original(x: np.ndarray, window: MeasurementWindow) -> float:
    """
    Range misfit over the window

    Args:
        x: Positions per vehicle per sample, shape (n, W, d)
        window: Measurements

    Returns:
        Sum over samples of half squared range residuals (edges and anchor links)
    """
    x = np.asarray(x, dtype=float)
    topo = window.topology
    if x.shape != (topo.n, window.W, window.d):
        raise ContractViolation(f"x must be (n={topo.n}, W={window.W}, d={window.d}), got {x.shape}")
    lo, hi = topo.edge_endpoint_indices()
    veh, anc = topo.link_indices()
    edge_dist = np.linalg.norm(x[lo] - x[hi], axis=-1)
    link_dist = np.linalg.norm(x[veh] - window.anchor_positions()[anc], axis=-1)
    return float(0.5 * np.sum((edge_dist - window.ranges) ** 2)
                 + 0.5 * np.sum((link_dist - window.anchor_ranges) ** 2))


def window_deltas(window: MeasurementWindow, cumulative: Optional[np.ndarray] = None) -> WindowDeltas:
    """
    Velocity offsets of the edge and anchor residuals

    dv_ij(tau) = (v_i(tau) - v_j(tau)) * dt for every edge (i the +1 endpoint),
    alpha_ik(tau) = q_k - (v_i(tau) - u_k(tau)) * dt for every anchor link.
    """
    topo = window.topology
    v = cumulative_velocities(window) if cumulative is None else cumulative
    lo, hi = topo.edge_endpoint_indices()
    veh, anc = topo.link_indices()
    dv = (v[lo] - v[hi]) * window.dt
    alpha = window.anchor_base[anc][:, None, :] - (v[veh] - window.anchor_velocity[anc]) * window.dt
    return WindowDeltas(topology=topo, dv=dv, alpha=alpha)


def residuals(z: StackedVariable, deltas: WindowDeltas) -> Tuple[np.ndarray, np.ndarray]:
    """Edge residuals DAp + dv - y and link residuals Ep - alpha - w"""
    topo = deltas.topology
    W, d = deltas.dv.shape[1:]
    z.check_shape(topo, W, d)
    lo, hi = topo.edge_endpoint_indices()
    veh, _ = topo.link_indices()
    r = (z.p[lo] - z.p[hi])[:, None, :] + deltas.dv - z.y
    s = z.p[veh][:, None, :] - deltas.alpha - z.w
    return r, s


def cost_stacked(z: StackedVariable, deltas: WindowDeltas) -> float:
    """Half squared norm of the stacked residuals (the quadratic plus its constant term)"""
    r, s = residuals(z, deltas)
    return float(0.5 * np.sum(r ** 2) + 0.5 * np.sum(s ** 2))


def gradient(z: StackedVariable, deltas: WindowDeltas) -> StackedVariable:
    """
    Gradient Mz - b of the stacked quadratic, evaluated without forming M

    Returns:
        StackedVariable-shaped tangent
    """
    topo = deltas.topology
    r, s = residuals(z, deltas)
    lo, hi = topo.edge_endpoint_indices()
    veh, _ = topo.link_indices()
    gp = np.zeros_like(z.p)
    r_sum = r.sum(axis=1)
    np.add.at(gp, lo, r_sum)
    np.add.at(gp, hi, -r_sum)
    np.add.at(gp, veh, s.sum(axis=1))
    return StackedVariable(p=gp, y=-r, w=-s)


def project_to_spheres(blocks: np.ndarray, radii: np.ndarray, tie_break: np.ndarray) -> np.ndarray:
    """
    Scale each d-vector in `blocks` onto the sphere with the matching radius

    Zero vectors map to radius * tie_break; zero radii map to the zero vector.
    """
    norms = np.linalg.norm(blocks, axis=-1)
    scale = np.divide(radii, norms, out=np.zeros_like(norms), where=norms > 0)
    out = blocks * scale[..., None]
    singular = norms == 0
    if np.any(singular):
        out[singular] = radii[singular][:, None] * tie_break[None, :]
    return out


def project_constraints(z: StackedVariable, window: MeasurementWindow,
                        tie_break: Optional[np.ndarray] = None) -> StackedVariable:
    """Projection onto the product of spheres; p passes through unchanged"""
    tb = checked_tie_break(tie_break, window.d)
    z.check_shape(window.topology, window.W, window.d)
    return StackedVariable(p=z.p.copy(),
                           y=project_to_spheres(z.y, window.ranges, tb),
                           w=project_to_spheres(z.w, window.anchor_ranges, tb))


def induced_stacked(p: np.ndarray, window: MeasurementWindow, deltas: Optional[WindowDeltas] = None,
                    tie_break: Optional[np.ndarray] = None) -> StackedVariable:
    """
    Feasible z for given start positions

    y and w are the sphere projections of the current relative positions,
    which makes cost_stacked(z) equal cost_original at the induced trajectory.
    """
    deltas = window_deltas(window) if deltas is None else deltas
    p = np.asarray(p, dtype=float).copy()
    topo = window.topology
    lo, hi = topo.edge_endpoint_indices()
    veh, _ = topo.link_indices()
    z = StackedVariable(p=p, y=(p[lo] - p[hi])[:, None, :] + deltas.dv,
                        w=p[veh][:, None, :] - deltas.alpha)
    return project_constraints(z, window, tie_break)


def lipschitz_bound(topology: NetworkTopology, W: int) -> float:
    """
    Step constant W * (2 * max degree + max anchor links) + 2

    Upper-bounds the largest eigenvalue of the implicit M for a window of
    W samples.
    """
    if W < 1:
        raise ContractViolation(f"window length must be at least 1, got {W}")
    if topology.n == 0:
        raise ContractViolation("empty topology")
    return float(W * (2 * topology.max_degree + topology.max_anchor_links) + 2)


def t0_lipschitz_bound(topology: NetworkTopology, W: int) -> float:
    """Same bound counted with W - 1 samples; kept to show it can undershoot lambda_max(M)"""
    return float((W - 1) * (2 * topology.max_degree + topology.max_anchor_links) + 2)


def beta_coefficients(topology: NetworkTopology, W: int, L: float) -> np.ndarray:
    """
    Per-vehicle weight on p_i in the distributed p-update

    beta_i = (L - W * (deg_i + |A_i|)) / L, ordered like topology.vehicles.
    """
    load = np.array([topology.degrees[v] + len(topology.anchors_of(v)) for v in topology.vehicles],
                    dtype=float)
    beta = (L - W * load) / L
    if np.any(beta <= 0):
        bad = [v for v, b in zip(topology.vehicles, beta) if b <= 0]
        raise ParameterError(f"L={L} too small for window length {W}: beta <= 0 at vehicles {bad}")
    return beta


def solver_params(topology: NetworkTopology, W: int, max_iters: int = DEFAULT_MAX_ITERS,
                  rel_tol: float = DEFAULT_REL_TOL, lipschitz: Optional[float] = None,
                  tie_break: Optional[np.ndarray] = None) -> SolverParams:
    """Build solver parameters for a topology and window length"""
    bound = lipschitz_bound(topology, W)
    L = bound if lipschitz is None else float(lipschitz)
    if L < bound:
        raise ParameterError(f"L={L} is below the step bound {bound} for W={W}")
    return SolverParams(lipschitz=L, beta=beta_coefficients(topology, W, L), max_iters=max_iters,
                        rel_tol=rel_tol, tie_break=tie_break)


def apply_quadratic(z: StackedVariable, topology: NetworkTopology) -> StackedVariable:
    """Matrix-free product Mz"""
    W, d = z.y.shape[1:]
    zero = WindowDeltas(topology=topology, dv=np.zeros((topology.num_edges, W, d)),
                        alpha=np.zeros((topology.num_links, W, d)))
    return gradient(z, zero)


def estimate_lambda_max(topology: NetworkTopology, W: int, d: int, tol: float = 1e-8,
                        max_iters: int = 20000, seed: int = 0) -> float:
    """
    Largest eigenvalue of M by power iteration on the matrix-free operator

    Stops when the Rayleigh quotient changes by less than tol relative.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    template = StackedVariable.zeros(topology, W, d)
    v = template.unflatten(rng.standard_normal(template.size))
    v = v.unflatten(v.flatten() / v.norm())
    lam = 0.0
    for it in range(max_iters):
        mv = apply_quadratic(v, topology)
        new_lam = float(np.dot(v.flatten(), mv.flatten()))
        nrm = mv.norm()
        if nrm == 0:
            return 0.0
        v = mv.unflatten(mv.flatten() / nrm)
        if it > 0 and abs(new_lam - lam) <= tol * max(abs(new_lam), 1.0):
            lam = new_lam
            break
        lam = new_lam
    logger.debug(f"power iteration: lambda_max ~ {lam:.10g} after {it + 1} iterations")
    return lam
