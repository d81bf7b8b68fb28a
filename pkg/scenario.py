"""
Scenario Generation

Ground-truth formation trajectories (lap, lawnmower, descending helix),
the default measurement topology derived from the formation, and noisy
measurement synthesis driven by counter-based random streams.

Formation slots are numbered 1..4 across the path; the two centre slots
carry GPS and act as anchors, the outer two are the vehicles being
localized.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from geom_core import DieselError, NetworkTopology, as_vec, space_dim
from problem import MeasurementSample

logger = logging.getLogger(__name__)

FORMATION_SLOTS = (1, 2, 3, 4)
ANCHOR_SLOTS = (2, 3)


class ScenarioConfigError(DieselError, ValueError):
    """Invalid trajectory, formation or noise settings"""


class TrajectoryShape(str, Enum):
    LAP = "lap"
    LAWNMOWER = "lawnmower"
    HELIX = "helix"


class TrajectoryKind(BaseModel):
    """Path shape and its geometric parameters (meters, m/s)"""
    kind: TrajectoryShape = TrajectoryShape.LAP
    leg_length: float = 100.0
    lap_radius: float = 30.0
    leg_spacing: float = 20.0
    helix_radius: float = 30.0
    descent_rate: float = 0.1
    speed: float = 1.0

    @field_validator("leg_length", "lap_radius", "leg_spacing", "helix_radius", "descent_rate", "speed")
    @classmethod
    def _positive(cls, value: float, info) -> float:
        if not value > 0:
            raise ScenarioConfigError(f"{info.field_name} must be positive, got {value}")
        return value

    @property
    def dim(self) -> int:
        return 3 if self.kind == TrajectoryShape.HELIX else 2

    def path_length(self) -> float:
        """Arc length of one period of the centre path (inf for open paths)"""
        if self.kind == TrajectoryShape.LAP:
            return 2 * self.leg_length + 2 * np.pi * self.lap_radius
        if self.kind == TrajectoryShape.HELIX:
            return 2 * np.pi * self.helix_radius
        return float("inf")


class FormationConfig(BaseModel):
    """Four slots across the path; slots 2 and 3 carry GPS"""
    lateral_offsets: Tuple[float, float, float, float] = (-15.0, -5.0, 5.0, 15.0)
    along_track_offsets: Tuple[float, float, float, float] = (0.0, 6.0, -6.0, 0.0)
    anchor_slots: Tuple[int, int] = ANCHOR_SLOTS
    # explicit measurement graph; None means the default derived from the formation
    edges: Optional[List[Tuple[int, int]]] = None
    anchor_links: Optional[Dict[int, List[int]]] = None

    @field_validator("anchor_slots")
    @classmethod
    def _centre_anchors(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if set(value) != set(ANCHOR_SLOTS):
            raise ScenarioConfigError(f"anchor slots must be {ANCHOR_SLOTS}, got {value}")
        return tuple(sorted(value))

    @property
    def vehicle_slots(self) -> Tuple[int, ...]:
        return tuple(s for s in FORMATION_SLOTS if s not in self.anchor_slots)


class NoiseConfig(BaseModel):
    """Measurement noise, initialization dispersion and water current"""
    sigma_range: float = Field(default=0.5, ge=0.0)
    sigma_vel: float = Field(default=0.01, ge=0.0)
    sigma_init: float = Field(default=2.0, ge=0.0)
    current: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    seed: int = Field(default=0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _finite_current(self) -> "NoiseConfig":
        if not all(np.isfinite(self.current)):
            raise ScenarioConfigError(f"current must be finite, got {self.current}")
        return self

    def current_vec(self, d: int) -> np.ndarray:
        """Current as a length-d vector; missing trailing components are zero"""
        if len(self.current) > d:
            raise ScenarioConfigError(f"current has {len(self.current)} components for d={d}")
        vec = np.zeros(d)
        vec[:len(self.current)] = self.current
        return vec


@dataclass
class GroundTruth:
    """True positions and water-relative velocities of every formation slot"""
    slots: Tuple[int, ...]
    positions: np.ndarray        # (T, S, d)
    rel_velocities: np.ndarray   # (T, S, d)
    dt: float
    current: np.ndarray          # (d,)

    @property
    def ticks(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[2]

    def rows(self, ids: Sequence[int]) -> List[int]:
        return [self.slots.index(i) for i in ids]

    def positions_of(self, ids: Sequence[int]) -> np.ndarray:
        return self.positions[:, self.rows(ids), :]

    def velocities_of(self, ids: Sequence[int]) -> np.ndarray:
        return self.rel_velocities[:, self.rows(ids), :]


def _lap_point(kind: TrajectoryKind, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    L, R = kind.leg_length, kind.lap_radius
    s = np.mod(s, kind.path_length())
    arc = np.pi * R
    point = np.zeros(s.shape + (2,))
    tangent = np.zeros(s.shape + (2,))

    seg = np.select([s < L, s < L + arc, s < 2 * L + arc], [0, 1, 2], default=3)

    m = seg == 0
    point[m] = np.stack([s[m], np.zeros(m.sum())], axis=-1)
    tangent[m] = (1.0, 0.0)

    m = seg == 1
    theta = -np.pi / 2 + (s[m] - L) / R
    point[m] = np.stack([L + R * np.cos(theta), R + R * np.sin(theta)], axis=-1)
    tangent[m] = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)

    m = seg == 2
    point[m] = np.stack([L - (s[m] - L - arc), np.full(m.sum(), 2 * R)], axis=-1)
    tangent[m] = (-1.0, 0.0)

    m = seg == 3
    theta = np.pi / 2 + (s[m] - 2 * L - arc) / R
    point[m] = np.stack([R * np.cos(theta), R + R * np.sin(theta)], axis=-1)
    tangent[m] = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    return point, tangent


def _lawnmower_point(kind: TrajectoryKind, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    L, S = kind.leg_length, kind.leg_spacing
    r = S / 2
    unit = L + np.pi * r
    orig = s
    lead_in = s < 0
    s = np.where(lead_in, 0.0, s)
    k = np.floor(s / unit).astype(int)
    u = s - k * unit
    forward = (k % 2) == 0
    base_y = k * S

    point = np.zeros(s.shape + (2,))
    tangent = np.zeros(s.shape + (2,))
    on_leg = u < L

    m = on_leg & forward
    point[m] = np.stack([u[m], base_y[m]], axis=-1)
    tangent[m] = (1.0, 0.0)

    m = on_leg & ~forward
    point[m] = np.stack([L - u[m], base_y[m]], axis=-1)
    tangent[m] = (-1.0, 0.0)

    # turns: counter-clockwise at the far end, clockwise at the near end
    m = ~on_leg & forward
    theta = -np.pi / 2 + (u[m] - L) / r
    point[m] = np.stack([L + r * np.cos(theta), base_y[m] + r + r * np.sin(theta)], axis=-1)
    tangent[m] = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)

    m = ~on_leg & ~forward
    theta = -np.pi / 2 - (u[m] - L) / r
    point[m] = np.stack([r * np.cos(theta), base_y[m] + r + r * np.sin(theta)], axis=-1)
    tangent[m] = np.stack([np.sin(theta), -np.cos(theta)], axis=-1)

    # straight approach before the first leg
    point[lead_in] = np.stack([orig[lead_in], np.zeros(lead_in.sum())], axis=-1)
    tangent[lead_in] = (1.0, 0.0)
    return point, tangent


def _helix_point(kind: TrajectoryKind, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    R = kind.helix_radius
    theta = s / R
    point = np.stack([R * np.cos(theta), R * np.sin(theta)], axis=-1)
    tangent = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    return point, tangent


_PATHS = {
    TrajectoryShape.LAP: _lap_point,
    TrajectoryShape.LAWNMOWER: _lawnmower_point,
    TrajectoryShape.HELIX: _helix_point,
}


def path_point(kind: TrajectoryKind, s) -> Tuple[np.ndarray, np.ndarray]:
    """
    Horizontal centre-path point and unit tangent at arc length s

    Args:
        kind: Path shape
        s: Arc length(s) in meters

    Returns:
        (point, tangent), each with shape s.shape + (2,)
    """
    return _PATHS[kind.kind](kind, np.asarray(s, dtype=float))


def _formation_positions(kind: TrajectoryKind, formation: FormationConfig, ticks: int,
                         dt: float, d: int) -> np.ndarray:
    t = np.arange(ticks) * dt
    s = kind.speed * t
    out = np.zeros((ticks, len(FORMATION_SLOTS), d))
    for col, (lat, along) in enumerate(zip(formation.lateral_offsets, formation.along_track_offsets)):
        point, tangent = path_point(kind, s + along)
        normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=-1)
        out[:, col, :2] = point + lat * normal
    if d == 3:
        out[:, :, 2] = -kind.descent_rate * t[:, None]
    return out


def generate_trajectory(kind: TrajectoryKind, formation: FormationConfig, duration_ticks: int,
                        dt: float, current: Optional[Sequence[float]] = None,
                        d: Optional[int] = None) -> GroundTruth:
    """
    Ground truth for the formation following a path

    Args:
        kind: Path shape and parameters
        formation: Lateral and along-track slot offsets
        duration_ticks: Number of ticks T
        dt: Sampling interval in seconds
        current: Water current v_f (zero if None)
        d: Space dimension; defaults to 3 for the helix and 2 otherwise

    Returns:
        GroundTruth whose velocities satisfy x(t+1) = x(t) + dt * (v^R(t) + v_f)
    """
    d = space_dim(kind.dim if d is None else d)
    if kind.kind == TrajectoryShape.HELIX and d != 3:
        raise ScenarioConfigError(f"helix trajectories need d=3, got d={d}")
    if kind.kind != TrajectoryShape.HELIX and d != 2:
        raise ScenarioConfigError(f"{kind.kind.value} trajectories need d=2, got d={d}")
    if duration_ticks < 1:
        raise ScenarioConfigError(f"duration must be at least one tick, got {duration_ticks}")
    if dt <= 0:
        raise ScenarioConfigError(f"dt must be positive, got {dt}")

    vf = np.zeros(d)
    if current is not None:
        vf[:len(current)] = as_vec(current, len(current))

    # one extra tick so the last velocity is a true forward difference as well
    track = _formation_positions(kind, formation, duration_ticks + 1, dt, d)
    inertial = np.diff(track, axis=0) / dt
    logger.debug(f"generated {kind.kind.value} trajectory: {duration_ticks} ticks, d={d}")
    return GroundTruth(slots=FORMATION_SLOTS, positions=track[:-1], rel_velocities=inertial - vf,
                       dt=dt, current=vf)


def formation_topology(formation: FormationConfig) -> NetworkTopology:
    """
    Measurement graph of the formation

    By default every pair of free vehicles measures its range and every
    free vehicle ranges to both anchors; explicit edges / anchor links
    in the formation replace the defaults.
    """
    vehicles = formation.vehicle_slots
    if formation.edges is not None:
        edges = [tuple(e) for e in formation.edges]
    else:
        edges = [(i, j) for a, i in enumerate(vehicles) for j in vehicles[a + 1:]]
    if formation.anchor_links is not None:
        links = {int(v): tuple(ks) for v, ks in formation.anchor_links.items()}
    else:
        links = {v: tuple(formation.anchor_slots) for v in vehicles}
    return NetworkTopology(vehicles=vehicles, anchors=tuple(formation.anchor_slots),
                           edges=tuple(edges), anchor_links=links)


def noise_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent Philox streams for range, velocity and initialization noise"""
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: np.random.Generator(np.random.Philox(child))
            for name, child in zip(("range", "velocity", "init"), children)}


def true_ranges(truth: GroundTruth, topology: NetworkTopology) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free ranges per tick: (T, E) vehicle pairs and (T, K) anchor links"""
    x = truth.positions_of(topology.vehicles)
    a = truth.positions_of(topology.anchors)
    lo, hi = topology.edge_endpoint_indices()
    veh, anc = topology.link_indices()
    edge_ranges = np.linalg.norm(x[:, lo, :] - x[:, hi, :], axis=-1)
    link_ranges = np.linalg.norm(x[:, veh, :] - a[:, anc, :], axis=-1)
    return edge_ranges.reshape(truth.ticks, topology.num_edges), link_ranges.reshape(truth.ticks, topology.num_links)


def synthesize_measurements(truth: GroundTruth, topology: NetworkTopology,
                            noise: NoiseConfig, seed: Optional[int] = None) -> List[MeasurementSample]:
    """
    Noisy measurement stream for a ground truth

    Args:
        truth: Ground truth trajectories
        topology: Measurement graph over the formation slots
        noise: Noise levels (its seed is used when `seed` is None)
        seed: Per-trial seed

    Returns:
        One MeasurementSample per tick; one range draw per unordered pair
        and link, ranges clamped at zero, anchor positions exact
    """
    streams = noise_streams(noise.seed if seed is None else seed)
    T = truth.ticks
    edge_ranges, link_ranges = true_ranges(truth, topology)
    E, K = topology.num_edges, topology.num_links

    range_noise = streams["range"].normal(0.0, noise.sigma_range, size=(T, E + K))
    edge_ranges = np.maximum(edge_ranges + range_noise[:, :E], 0.0)
    link_ranges = np.maximum(link_ranges + range_noise[:, E:], 0.0)

    velocities = truth.velocities_of(topology.vehicles)
    velocities = velocities + streams["velocity"].normal(0.0, noise.sigma_vel, size=velocities.shape)
    anchors = truth.positions_of(topology.anchors)

    return [MeasurementSample(tick=t, ranges=edge_ranges[t].copy(), anchor_ranges=link_ranges[t].copy(),
                              rel_velocities=velocities[t].copy(), anchor_positions=anchors[t].copy())
            for t in range(T)]


def initial_guess(truth: GroundTruth, topology: NetworkTopology, noise: NoiseConfig,
                  seed: Optional[int] = None) -> np.ndarray:
    """True tick-0 vehicle positions perturbed by N(0, sigma_init^2 I)"""
    rng = noise_streams(noise.seed if seed is None else seed)["init"]
    x0 = truth.positions_of(topology.vehicles)[0]
    return x0 + rng.normal(0.0, noise.sigma_init, size=x0.shape)


def export_ground_truth(truth: GroundTruth, path: Path) -> Path:
    """Write one row per (tick, slot): position and relative velocity components"""
    axes = "xyz"[:truth.d]
    T, S, _ = truth.positions.shape
    frame = pd.DataFrame({
        "tick": np.repeat(np.arange(T), S),
        "id": np.tile(np.array(truth.slots), T),
    })
    for k, ax in enumerate(axes):
        frame[ax] = truth.positions[:, :, k].ravel()
    for k, ax in enumerate(axes):
        frame[f"v{ax}"] = truth.rel_velocities[:, :, k].ravel()
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"ground truth written to {path} ({len(frame)} rows)")
    return path


def export_measurements(stream: Sequence[MeasurementSample], topology: NetworkTopology, path: Path) -> Path:
    """
    Write the measurement stream in long form

    Columns: tick, kind (range | anchor_range | velocity), a, b, value.
    Ranges use the pair (a, b); velocities use a = vehicle, b = axis index.
    """
    records = []
    for sample in stream:
        for e, (i, j) in enumerate(topology.edges):
            records.append((sample.tick, "range", i, j, float(sample.ranges[e])))
        for l, (v, k) in enumerate(topology.links):
            records.append((sample.tick, "anchor_range", v, k, float(sample.anchor_ranges[l])))
        for row, v in enumerate(topology.vehicles):
            for axis, value in enumerate(sample.rel_velocities[row]):
                records.append((sample.tick, "velocity", v, axis, float(value)))
    frame = pd.DataFrame.from_records(records, columns=["tick", "kind", "a", "b", "value"])
    path = Path(path)
    frame.to_csv(path, index=False)
    logger.info(f"measurement stream written to {path} ({len(frame)} rows)")
    return path
