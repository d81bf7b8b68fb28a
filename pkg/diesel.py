"""
Distributed Self-Localization Solver

Each vehicle keeps its own slice of the stacked variable (its position,
its copies of the incident edge variables and its anchor-link variables)
and advances it in synchronous rounds: broadcast p_i, wait at the
barrier, update locally from the neighbours' broadcasts. A full round
over all vehicles is exactly one projected-gradient step with step 1/L
on the windowed quadratic.

The tracker slides the window along the measurement stream and
warm-starts every solve from the previous one.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from geom_core import DieselError, NetworkTopology, incidence_sign, neighbors
from problem import (
    DEFAULT_MAX_ITERS,
    DEFAULT_REL_TOL,
    MeasurementSample,
    MeasurementWindow,
    SolverParams,
    StackedVariable,
    WindowDeltas,
    checked_tie_break,
    cost_stacked,
    cumulative_velocities,
    induced_stacked,
    project_constraints,
    project_to_spheres,
    solver_params,
    window_deltas,
)

logger = logging.getLogger(__name__)


class SynchronizationFault(DieselError):
    """A node's inbox is missing a neighbour message or holds a duplicate"""


class NumericalFault(DieselError):
    """The iterate stopped being finite"""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class BroadcastMsg:
    """What a node sends its neighbours each round"""
    sender: int
    p: np.ndarray
    round: int


@dataclass
class LocalWindow:
    """The part of a measurement window one vehicle can see"""
    vehicle: int
    neighbors: Tuple[int, ...]
    signs: np.ndarray           # (deg,) incidence sign of this vehicle on each incident edge
    ranges: np.ndarray          # (deg, W)
    dv: np.ndarray              # (deg, W, d) oriented from the +1 endpoint
    anchors: Tuple[int, ...]
    anchor_ranges: np.ndarray   # (|A_i|, W)
    alpha: np.ndarray           # (|A_i|, W, d)
    tie_break: np.ndarray


@dataclass
class NodeState:
    """Per-vehicle variables and the last neighbour broadcasts it received"""
    vehicle: int
    p: np.ndarray
    y: np.ndarray               # (deg, W, d) local copies of incident edge variables
    w: np.ndarray               # (|A_i|, W, d)
    neighbor_p: Dict[int, np.ndarray]
    beta: float
    lipschitz: float
    round: int = 0


@dataclass
class SolveReport:
    """Outcome of one window solve"""
    iterations: int
    final_cost: float
    cost_trace: List[float]
    stop_reason: str            # "tolerance" or "max_iters"
    fixed_point_residual: float


def local_window(window: MeasurementWindow, deltas: WindowDeltas, vehicle: int,
                 tie_break: Optional[np.ndarray] = None) -> LocalWindow:
    """
    Slice a window down to what `vehicle` measures itself

    Args:
        window: Full measurement window
        deltas: Velocity offsets of the same window
        vehicle: Vehicle id
        tie_break: Unit vector used when projecting a zero block

    Returns:
        LocalWindow holding only incident-edge and own anchor-link data
    """
    topo = window.topology
    edges = list(topo.incident_edges(vehicle))
    links = list(topo.links_of(vehicle))
    signs = np.array([incidence_sign(topo, e, vehicle) for e in edges], dtype=float)
    tb = checked_tie_break(tie_break, window.d)
    return LocalWindow(
        vehicle=vehicle,
        neighbors=tuple(neighbors(topo, vehicle)),
        signs=signs,
        ranges=window.ranges[edges].copy(),
        dv=deltas.dv[edges].copy(),
        anchors=topo.anchors_of(vehicle),
        anchor_ranges=window.anchor_ranges[links].copy(),
        alpha=deltas.alpha[links].copy(),
        tie_break=tb,
    )


def node_states_from(z: StackedVariable, topology: NetworkTopology,
                     params: SolverParams) -> Dict[int, NodeState]:
    """Split a stacked variable into per-vehicle states"""
    states = {}
    for idx, v in enumerate(topology.vehicles):
        edges = list(topology.incident_edges(v))
        links = list(topology.links_of(v))
        states[v] = NodeState(
            vehicle=v,
            p=z.p[idx].copy(),
            y=z.y[edges].copy(),
            w=z.w[links].copy(),
            neighbor_p={},
            beta=float(params.beta[idx]),
            lipschitz=params.lipschitz,
        )
    return states


def node_round(state: NodeState, inbox: Mapping[int, BroadcastMsg],
               local: LocalWindow) -> Tuple[NodeState, BroadcastMsg]:
    """
    One synchronous update of a single vehicle

    Args:
        state: The vehicle's variables after the previous round
        inbox: Exactly one message per neighbour, all from round `state.round`
        local: The vehicle's own measurements and offsets

    Returns:
        Updated state and the broadcast carrying the new p_i for the next round
    """
    expected = set(local.neighbors)
    received = set(inbox.keys())
    if received != expected:
        raise SynchronizationFault(
            f"vehicle {state.vehicle} round {state.round}: expected messages from "
            f"{sorted(expected)}, got {sorted(received)}")

    d = state.p.shape[0]
    L = state.lipschitz
    nb_p = []
    for j in local.neighbors:
        msg = inbox[j]
        if msg.sender != j or msg.round != state.round:
            raise SynchronizationFault(
                f"vehicle {state.vehicle} round {state.round}: bad message from {j} "
                f"(sender {msg.sender}, round {msg.round})")
        nb_p.append(msg.p)
    nb_p = np.array(nb_p, dtype=float).reshape(len(local.neighbors), d)
    W = local.ranges.shape[1]

    own = np.broadcast_to(state.p, nb_p.shape)
    plus_side = local.signs[:, None] > 0
    p_lo = np.where(plus_side, own, nb_p)
    p_hi = np.where(plus_side, nb_p, own)
    diff = p_lo - p_hi

    # Jacobi step: everything below reads the previous round's values only
    y_step = ((L - 1.0) / L) * state.y + (1.0 / L) * (diff[:, None, :] + local.dv)
    w_step = ((L - 1.0) / L) * state.w + (1.0 / L) * (state.p[None, None, :] - local.alpha)

    pull = W * nb_p.sum(axis=0)
    pull = pull + np.einsum("e,ed->d", local.signs, (state.y - local.dv).sum(axis=1))
    pull = pull + (local.alpha + state.w).sum(axis=(0, 1))
    p_next = state.beta * state.p + (1.0 / L) * pull

    new_state = replace(
        state,
        p=p_next,
        y=project_to_spheres(y_step, local.ranges, local.tie_break),
        w=project_to_spheres(w_step, local.anchor_ranges, local.tie_break),
        neighbor_p={j: nb_p[k].copy() for k, j in enumerate(local.neighbors)},
        round=state.round + 1,
    )
    return new_state, BroadcastMsg(sender=state.vehicle, p=p_next.copy(), round=state.round + 1)


class Mailbox:
    """In-process message transport keyed by round"""

    def __init__(self):
        self._rounds: Dict[int, Dict[int, List[BroadcastMsg]]] = {}

    def post(self, msg: BroadcastMsg):
        self._rounds.setdefault(msg.round, {}).setdefault(msg.sender, []).append(msg)

    def drop(self, sender: int, round_index: int):
        """Lose a message (used to exercise barrier recovery)"""
        self._rounds.get(round_index, {}).pop(sender, None)

    def collect(self, receiver: int, senders: Sequence[int], round_index: int) -> Dict[int, BroadcastMsg]:
        box = self._rounds.get(round_index, {})
        inbox = {}
        for j in senders:
            msgs = box.get(j, [])
            if len(msgs) != 1:
                raise SynchronizationFault(
                    f"vehicle {receiver} round {round_index}: {len(msgs)} messages from {j}")
            inbox[j] = msgs[0]
        return inbox

    def discard_before(self, round_index: int):
        for r in [r for r in self._rounds if r < round_index]:
            del self._rounds[r]


class RoundEngine:
    """
    Runs node_round for every vehicle, one barrier per round

    Nodes only ever read the previous round's broadcasts, so the order in
    which they are visited does not change the result.
    """

    def __init__(self, window: MeasurementWindow, params: SolverParams,
                 node_order: Optional[Sequence[int]] = None):
        self.topology = window.topology
        self.window = window
        self.params = params
        self.deltas = window_deltas(window)
        tb = params.tie_break_for(window.d)
        self.locals = {v: local_window(window, self.deltas, v, tb) for v in self.topology.vehicles}
        self.order = tuple(node_order) if node_order is not None else self.topology.vehicles
        if sorted(self.order) != list(self.topology.vehicles):
            raise DieselError(f"node order {self.order} is not a permutation of the vehicles")
        self.mailbox = Mailbox()
        self.states: Dict[int, NodeState] = {}
        self._outbox: Dict[int, BroadcastMsg] = {}
        self.round = 0
        # row of each edge's +1 endpoint copy in the vehicle-ordered concatenation of local y
        rows, offset = np.zeros(self.topology.num_edges, dtype=int), 0
        for v in self.topology.vehicles:
            for k, e in enumerate(self.topology.incident_edges(v)):
                if self.topology.edges[e][0] == v:
                    rows[e] = offset + k
            offset += len(self.topology.incident_edges(v))
        self._edge_rows = rows

    def start(self, z: StackedVariable):
        self.states = node_states_from(z, self.topology, self.params)
        self.round = 0
        self._outbox = {}
        for v, st in self.states.items():
            msg = BroadcastMsg(sender=v, p=st.p.copy(), round=0)
            self._outbox[v] = msg
            self.mailbox.post(msg)

    def _inbox(self, v: int) -> Dict[int, BroadcastMsg]:
        senders = self.locals[v].neighbors
        try:
            return self.mailbox.collect(v, senders, self.round)
        except SynchronizationFault as e:
            logger.warning(f"barrier retry for vehicle {v}: {e}")
            for j in senders:
                self.mailbox.drop(j, self.round)
                self.mailbox.post(self._outbox[j])
            return self.mailbox.collect(v, senders, self.round)

    def step(self):
        """Execute one synchronous round over all vehicles"""
        inboxes = {v: self._inbox(v) for v in self.order}
        new_states = {}
        outbox = {}
        for v in self.order:
            new_states[v], outbox[v] = node_round(self.states[v], inboxes[v], self.locals[v])
        self.states = {v: new_states[v] for v in self.topology.vehicles}
        self.round += 1
        self._outbox = outbox
        for v in self.topology.vehicles:
            self.mailbox.post(outbox[v])
        self.mailbox.discard_before(self.round)

    def assemble(self) -> StackedVariable:
        """Stacked variable with each edge read from its +1 endpoint's copy"""
        vehicles = self.topology.vehicles
        p = np.stack([self.states[v].p for v in vehicles])
        y = np.concatenate([self.states[v].y for v in vehicles])[self._edge_rows]
        w = np.concatenate([self.states[v].w for v in vehicles])
        return StackedVariable(p=p, y=y, w=w)

    def cost(self) -> float:
        return cost_stacked(self.assemble(), self.deltas)

    def edge_copies(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(lower endpoint copy, higher endpoint copy) of every edge variable"""
        topo = self.topology
        copies = []
        for e, (i, j) in enumerate(topo.edges):
            ki = topo.incident_edges(i).index(e)
            kj = topo.incident_edges(j).index(e)
            copies.append((self.states[i].y[ki], self.states[j].y[kj]))
        return copies


class StackedRoundEngine:
    """
    Every vehicle's node_round of one round, evaluated at once on the stacked arrays

    Holds a single copy of each edge variable; the residuals computed for
    a step also give the cost of the iterate they were taken at.
    """

    def __init__(self, window: MeasurementWindow, params: SolverParams):
        topo = window.topology
        self.topology = topo
        self.window = window
        self.deltas = window_deltas(window)
        self.lipschitz = params.lipschitz
        self.tie_break = params.tie_break_for(window.d)
        self.lo, self.hi = topo.edge_endpoint_indices()
        self.veh, _ = topo.link_indices()
        self.incidence_t = topo.incidence_matrix().T           # (n, E)
        links = np.zeros((topo.n, topo.num_links))
        links[self.veh, np.arange(topo.num_links)] = 1.0
        self.links = links                                      # (n, K)
        self.z: Optional[StackedVariable] = None
        self._residuals: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def start(self, z: StackedVariable):
        self.z = z.copy()
        self._residuals = None

    def _current_residuals(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._residuals is None:
            p = self.z.p
            r = (p[self.lo] - p[self.hi])[:, None, :] + self.deltas.dv - self.z.y
            s = p[self.veh][:, None, :] - self.deltas.alpha - self.z.w
            self._residuals = (r, s)
        return self._residuals

    def cost(self) -> float:
        r, s = self._current_residuals()
        return float(0.5 * np.sum(r ** 2) + 0.5 * np.sum(s ** 2))

    def step(self):
        """One projected-gradient step with step 1/L"""
        r, s = self._current_residuals()
        L = self.lipschitz
        grad_p = self.incidence_t @ r.sum(axis=1) + self.links @ s.sum(axis=1)
        self.z = StackedVariable(
            p=self.z.p - grad_p / L,
            y=project_to_spheres(self.z.y + r / L, self.window.ranges, self.tie_break),
            w=project_to_spheres(self.z.w + s / L, self.window.anchor_ranges, self.tie_break),
        )
        self._residuals = None

    def assemble(self) -> StackedVariable:
        return self.z


def run_window(topology: NetworkTopology, window: MeasurementWindow, init: StackedVariable,
               params: SolverParams, node_order: Optional[Sequence[int]] = None,
               message_passing: bool = False) -> Tuple[StackedVariable, SolveReport]:
    """
    Solve one window by synchronous distributed rounds

    Args:
        topology: Network topology (must be the window's)
        window: Measurements of the window
        init: Starting point; projected onto the constraint set first
        params: Step constant, betas and stopping budget
        node_order: Optional visiting order of vehicles within a round (implies message passing)
        message_passing: Run every vehicle's node_round through the mailbox instead of
            the stacked rounds; both give the same iterates up to rounding

    Returns:
        Final iterate and a SolveReport
    """
    if topology is not window.topology and topology != window.topology:
        raise DieselError("topology does not match the window's topology")
    init.check_shape(topology, window.W, window.d)
    tb = params.tie_break_for(window.d)
    z = project_constraints(init, window, tb)
    if not z.is_finite():
        raise NumericalFault("initial point is not finite", 0)

    if message_passing or node_order is not None:
        engine = RoundEngine(window, params, node_order)
    else:
        engine = StackedRoundEngine(window, params)
    engine.start(z)
    costs = []
    stop_reason = "max_iters"
    step_norm = float("inf")
    iterations = 0
    for kappa in range(1, params.max_iters + 1):
        costs.append(engine.cost())
        engine.step()
        z_next = engine.assemble()
        iterations = kappa
        if not z_next.is_finite():
            raise NumericalFault("iterate became non-finite", kappa)
        step_norm = z_next.distance(z)
        scale = 1.0 + z.norm()
        z = z_next
        if step_norm <= params.rel_tol * scale:
            stop_reason = "tolerance"
            break
    costs.append(engine.cost())

    report = SolveReport(iterations=iterations, final_cost=costs[-1], cost_trace=costs,
                         stop_reason=stop_reason, fixed_point_residual=step_norm)
    logger.debug(f"window at tick {window.first_tick}: {iterations} rounds, "
                 f"cost {costs[0]:.6g} -> {costs[-1]:.6g} ({stop_reason})")
    return z, report


def dense_quadratic(topology: NetworkTopology, deltas: WindowDeltas) -> Tuple[np.ndarray, np.ndarray]:
    """
    Materialize M and b of the stacked quadratic

    Only meant for oracle checks on small instances.
    """
    E, W, d = deltas.dv.shape
    K = deltas.alpha.shape[0]
    n = topology.n
    veh, _ = topology.link_indices()
    select = np.zeros((K, n))
    select[np.arange(K), veh] = 1.0
    # rows run over (edge or link, sample, axis), p columns over (vehicle, axis)
    spread = np.kron(np.ones((W, 1)), np.eye(d))
    Ny, Nw = E * W * d, K * W * d
    B = np.block([
        [np.kron(topology.incidence_matrix(), spread), -np.eye(Ny), np.zeros((Ny, Nw))],
        [np.kron(select, spread), np.zeros((Nw, Ny)), -np.eye(Nw)],
    ])
    offset = np.concatenate([deltas.dv.ravel(), -deltas.alpha.ravel()])
    return B.T @ B, -B.T @ offset


def centralized_reference_step(z: StackedVariable, window: MeasurementWindow,
                               topology: NetworkTopology, L: float,
                               tie_break: Optional[np.ndarray] = None) -> StackedVariable:
    """One projected-gradient step z+ = P(z - (Mz - b) / L) with dense M and b"""
    deltas = window_deltas(window)
    M, b = dense_quadratic(topology, deltas)
    flat = z.flatten()
    stepped = z.unflatten(flat - (M @ flat - b) / L)
    return project_constraints(stepped, window, tie_break)


@dataclass
class TrackingParams:
    """Window length and per-window solver budget for the tracker"""
    window_len: int = 5                     # T0; windows hold window_len + 1 samples
    max_iters: int = DEFAULT_MAX_ITERS
    rel_tol: float = DEFAULT_REL_TOL
    tie_break: Optional[np.ndarray] = None
    warm_start: bool = True

    @property
    def samples(self) -> int:
        return self.window_len + 1


@dataclass
class TrackState:
    """Current window estimate and the positions it implies at the newest tick"""
    z: Optional[StackedVariable] = None
    positions: Optional[np.ndarray] = None
    tick: int = -1


@dataclass
class TrackResult:
    """Per-tick estimates of a whole run"""
    estimates: np.ndarray                    # (T, n, d), NaN at skipped ticks
    iterations: np.ndarray                   # (T,)
    final_costs: np.ndarray                  # (T,)
    stop_reasons: List[Optional[str]]
    skipped_ticks: List[int] = field(default_factory=list)


def advance_window_estimate(previous: StackedVariable, window: MeasurementWindow,
                            dropped_velocity: Optional[np.ndarray],
                            tie_break: Optional[np.ndarray] = None) -> StackedVariable:
    """
    Warm start for the next window

    p moves forward by dt * v^R of the dropped oldest sample (if the window
    slid), y/w keep their values for samples still inside the window, and the
    newest sample's y/w come from the projected current relative positions.
    Shifted blocks already sit on their spheres; run_window projects again.
    """
    p = previous.p.copy()
    if dropped_velocity is not None:
        p = p + window.dt * np.asarray(dropped_velocity, dtype=float)
    fresh = induced_stacked(p, window, tie_break=tie_break)
    shift = 1 if dropped_velocity is not None else 0
    kept = previous.y.shape[1] - shift
    kept = min(kept, window.W - 1)
    if kept > 0:
        fresh.y[:, :kept] = previous.y[:, shift:shift + kept]
        fresh.w[:, :kept] = previous.w[:, shift:shift + kept]
    return fresh


class Tracker:
    """Sliding-window tracker fed one sample per tick"""

    def __init__(self, topology: NetworkTopology, params: TrackingParams,
                 initial_guess: np.ndarray, dt: float):
        self.topology = topology
        self.params = params
        self.dt = dt
        self.initial_guess = np.asarray(initial_guess, dtype=float)
        self.state = TrackState()
        self._buffer: List[MeasurementSample] = []
        self._solver_cache: Dict[int, SolverParams] = {}
        self._rng = np.random.Generator(np.random.Philox(0))
        # last known relative velocities and the positions estimated or dead-reckoned at the last tick
        self._held_velocity: Optional[np.ndarray] = None
        self._last_positions: Optional[np.ndarray] = None

    def _solver(self, W: int) -> SolverParams:
        if W not in self._solver_cache:
            self._solver_cache[W] = solver_params(self.topology, W, self.params.max_iters,
                                                  self.params.rel_tol, tie_break=self.params.tie_break)
        return self._solver_cache[W]

    def skip(self, tick: int):
        """
        Handle a stream gap

        The window restarts. Positions are dead-reckoned through the gap
        with the last known velocities, and the first window after it
        starts from their extrapolation to the next tick.
        """
        logger.warning(f"stream gap at tick {tick}: window restarted")
        self._buffer = []
        if self._last_positions is not None and self._held_velocity is not None:
            self._last_positions = self._last_positions + self.dt * self._held_velocity
            self.initial_guess = self._last_positions + self.dt * self._held_velocity
        self.state = TrackState(z=None, positions=self._last_positions, tick=tick)

    def step(self, sample: MeasurementSample) -> Tuple[np.ndarray, SolveReport]:
        """Add a sample, solve the window ending at it and return x_hat at that tick"""
        self._buffer.append(sample)
        dropped = None
        if len(self._buffer) > self.params.samples:
            dropped = self._buffer.pop(0).rel_velocities
        window = MeasurementWindow.from_samples(self.topology, self._buffer, self.dt)
        tb = self.params.tie_break
        if self.state.z is None:
            init = induced_stacked(self.initial_guess, window, tie_break=tb)
        elif self.params.warm_start:
            init = advance_window_estimate(self.state.z, window, dropped, tb)
        else:
            init = induced_stacked(self.state.z.p + self._rng.normal(0.0, 1.0, self.state.z.p.shape),
                                   window, tie_break=tb)
        z, report = run_window(self.topology, window, init, self._solver(window.W))
        v = cumulative_velocities(window)
        positions = z.p + v[:, -1, :] * window.dt
        self.state = TrackState(z=z, positions=positions, tick=sample.tick)
        self._held_velocity = np.asarray(sample.rel_velocities, dtype=float)
        self._last_positions = positions
        return positions, report


def track(stream: Iterable[Optional[MeasurementSample]], topology: NetworkTopology,
          params: TrackingParams, initial_guess: np.ndarray, dt: float) -> TrackResult:
    """
    Track all vehicles along a measurement stream

    Args:
        stream: One sample per tick; None marks a gap
        topology: Network topology, fixed over the run
        params: Window length and solver budget
        initial_guess: Positions at the first tick, shape (n, d)
        dt: Sampling interval in seconds

    Returns:
        TrackResult with one estimate per tick
    """
    tracker = Tracker(topology, params, initial_guess, dt)
    d = tracker.initial_guess.shape[1]
    estimates, iterations, costs, reasons, skipped = [], [], [], [], []
    for t, sample in enumerate(stream):
        if sample is None:
            tracker.skip(t)
            skipped.append(t)
            estimates.append(np.full((topology.n, d), np.nan))
            iterations.append(0)
            costs.append(np.nan)
            reasons.append(None)
            continue
        positions, report = tracker.step(sample)
        estimates.append(positions)
        iterations.append(report.iterations)
        costs.append(report.final_cost)
        reasons.append(report.stop_reason)
    if skipped:
        logger.info(f"tracking finished with {len(skipped)} skipped ticks: {skipped}")
    return TrackResult(
        estimates=np.array(estimates).reshape(len(estimates), topology.n, d),
        iterations=np.array(iterations, dtype=int),
        final_costs=np.array(costs, dtype=float),
        stop_reasons=reasons,
        skipped_ticks=skipped,
    )
