"""
Geometric and Graph Primitives

This module holds the pieces every other module shares: the error
hierarchy, dimension checks for position/velocity vectors, and the
measurement/communication graph with its signed incidence bookkeeping.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_DIMS = (2, 3)


class DieselError(Exception):
    """Base class for every error raised by this package"""


class ContractViolation(DieselError, ValueError):
    """A precondition or shape contract was broken by the caller"""


class TopologyError(DieselError, ValueError):
    """The measurement graph is malformed"""


class UnknownVehicleError(DieselError, KeyError):
    """A vehicle id is not part of the topology"""


def space_dim(d: int) -> int:
    """
    Validate a space dimension

    Args:
        d: Requested dimension (2 for planar or depth-aided, 3 otherwise)

    Returns:
        The dimension as an int
    """
    if int(d) not in SUPPORTED_DIMS:
        raise ContractViolation(f"space dimension must be one of {SUPPORTED_DIMS}, got {d}")
    return int(d)


def as_vec(values: Iterable[float], d: int) -> np.ndarray:
    """Return a finite float vector of length d"""
    vec = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    if vec.shape != (d,):
        raise ContractViolation(f"expected a vector of length {d}, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ContractViolation(f"vector has non-finite components: {vec}")
    return vec


def unit_vec(d: int, axis: int = 0) -> np.ndarray:
    """Canonical unit vector e_axis in R^d"""
    e = np.zeros(d)
    e[axis] = 1.0
    return e


@dataclass(frozen=True)
class NetworkTopology:
    """
    Vehicles, anchors, measured pairs and anchor links for one window.

    Vehicles and anchors are identified by integer ids (disjoint sets).
    Edges are stored as (lower id, higher id) in the order given; the
    edge id is the position in `edges`. Anchor links are flattened in
    vehicle order, then in the order listed for each vehicle; the link
    id is the position in `links`.
    """
    vehicles: Tuple[int, ...]
    anchors: Tuple[int, ...]
    edges: Tuple[Tuple[int, int], ...]
    anchor_links: Mapping[int, Tuple[int, ...]]
    vehicle_index: Dict[int, int] = field(init=False, repr=False, compare=False)
    anchor_index: Dict[int, int] = field(init=False, repr=False, compare=False)
    degrees: Dict[int, int] = field(init=False, repr=False, compare=False)
    links: Tuple[Tuple[int, int], ...] = field(init=False, repr=False, compare=False)
    _adjacency: Dict[int, Tuple[int, ...]] = field(init=False, repr=False, compare=False)
    _incident: Dict[int, Tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vehicles = tuple(sorted(int(v) for v in self.vehicles))
        anchors = tuple(sorted(int(a) for a in self.anchors))
        if not vehicles:
            raise TopologyError("topology has no vehicles")
        if len(set(vehicles)) != len(vehicles):
            raise TopologyError(f"duplicate vehicle ids: {vehicles}")
        if len(set(anchors)) != len(anchors):
            raise TopologyError(f"duplicate anchor ids: {anchors}")
        overlap = set(vehicles) & set(anchors)
        if overlap:
            raise TopologyError(f"anchor ids overlap vehicle ids: {sorted(overlap)}")

        vset = set(vehicles)
        edges: List[Tuple[int, int]] = []
        seen = set()
        for raw in self.edges:
            i, j = (int(raw[0]), int(raw[1]))
            if i == j:
                raise TopologyError(f"self-loop on vehicle {i}")
            if i not in vset or j not in vset:
                raise TopologyError(f"edge {{{i}, {j}}} references an unknown vehicle")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise TopologyError(f"duplicate edge {{{key[0]}, {key[1]}}}")
            seen.add(key)
            edges.append(key)

        aset = set(anchors)
        anchor_links: Dict[int, Tuple[int, ...]] = {}
        for v, ks in dict(self.anchor_links).items():
            v = int(v)
            if v not in vset:
                raise TopologyError(f"anchor links given for unknown vehicle {v}")
            ks = tuple(int(k) for k in ks)
            if len(set(ks)) != len(ks):
                raise TopologyError(f"duplicate anchor link for vehicle {v}: {ks}")
            missing = [k for k in ks if k not in aset]
            if missing:
                raise TopologyError(f"vehicle {v} links to unknown anchors {missing}")
            if ks:
                anchor_links[v] = ks

        adjacency: Dict[int, List[int]] = {v: [] for v in vehicles}
        incident: Dict[int, List[int]] = {v: [] for v in vehicles}
        for e, (i, j) in enumerate(edges):
            adjacency[i].append(j)
            adjacency[j].append(i)
            incident[i].append(e)
            incident[j].append(e)

        isolated = [v for v in vehicles if not adjacency[v] and v not in anchor_links]
        if isolated:
            raise TopologyError(f"vehicles with no edges and no anchor links: {isolated}")

        # incident edges are ordered by neighbor id so node-local arrays line up with neighbors()
        for v in vehicles:
            pairs = sorted(zip(adjacency[v], incident[v]))
            adjacency[v] = [j for j, _ in pairs]
            incident[v] = [e for _, e in pairs]

        links = tuple((v, k) for v in vehicles for k in anchor_links.get(v, ()))

        set_ = object.__setattr__
        set_(self, "vehicles", vehicles)
        set_(self, "anchors", anchors)
        set_(self, "edges", tuple(edges))
        set_(self, "anchor_links", anchor_links)
        set_(self, "vehicle_index", {v: idx for idx, v in enumerate(vehicles)})
        set_(self, "anchor_index", {a: idx for idx, a in enumerate(anchors)})
        set_(self, "degrees", {v: len(adjacency[v]) for v in vehicles})
        set_(self, "links", links)
        set_(self, "_adjacency", {v: tuple(adjacency[v]) for v in vehicles})
        set_(self, "_incident", {v: tuple(incident[v]) for v in vehicles})

    @property
    def n(self) -> int:
        return len(self.vehicles)

    @property
    def m(self) -> int:
        return len(self.anchors)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def max_degree(self) -> int:
        return max(self.degrees.values())

    @property
    def max_anchor_links(self) -> int:
        return max((len(self.anchor_links.get(v, ())) for v in self.vehicles), default=0)

    def anchors_of(self, vehicle: int) -> Tuple[int, ...]:
        self._require(vehicle)
        return self.anchor_links.get(vehicle, ())

    def incident_edges(self, vehicle: int) -> Tuple[int, ...]:
        """Edge ids incident to `vehicle`, ordered like neighbors(vehicle)"""
        self._require(vehicle)
        return self._incident[vehicle]

    def links_of(self, vehicle: int) -> Tuple[int, ...]:
        """Link ids (positions in `links`) owned by `vehicle`"""
        self._require(vehicle)
        return tuple(l for l, (v, _) in enumerate(self.links) if v == vehicle)

    def edge_endpoint_indices(self) -> Tuple[np.ndarray, np.ndarray]:
        """Row indices of the (+1, -1) endpoints of every edge"""
        lo = np.array([self.vehicle_index[i] for i, _ in self.edges], dtype=int)
        hi = np.array([self.vehicle_index[j] for _, j in self.edges], dtype=int)
        return lo, hi

    def link_indices(self) -> Tuple[np.ndarray, np.ndarray]:
        """Vehicle row and anchor row of every anchor link"""
        veh = np.array([self.vehicle_index[v] for v, _ in self.links], dtype=int)
        anc = np.array([self.anchor_index[k] for _, k in self.links], dtype=int)
        return veh, anc

    def incidence_matrix(self) -> np.ndarray:
        """Dense arc-node incidence matrix C (edges x vehicles)"""
        C = np.zeros((self.num_edges, self.n))
        lo, hi = self.edge_endpoint_indices()
        rows = np.arange(self.num_edges)
        C[rows, lo] = 1.0
        C[rows, hi] = -1.0
        return C

    def _require(self, vehicle: int):
        if vehicle not in self._adjacency:
            raise UnknownVehicleError(vehicle)


def incidence_sign(topology: NetworkTopology, edge: int, vehicle: int) -> int:
    """
    Sign of `vehicle` on `edge` in the incidence matrix

    Args:
        topology: Network topology
        edge: Edge id
        vehicle: Vehicle id, must be an endpoint of the edge

    Returns:
        +1 for the lower-numbered endpoint, -1 for the higher-numbered one
    """
    if not 0 <= edge < topology.num_edges:
        raise ContractViolation(f"edge id {edge} out of range")
    i, j = topology.edges[edge]
    if vehicle == i:
        return 1
    if vehicle == j:
        return -1
    raise ContractViolation(f"vehicle {vehicle} is not an endpoint of edge {{{i}, {j}}}")


def neighbors(topology: NetworkTopology, vehicle: int) -> List[int]:
    """Sorted list of vehicles sharing an edge with `vehicle`"""
    topology._require(vehicle)
    return list(topology._adjacency[vehicle])


def chain_topology(length: int, anchor_links: Optional[Mapping[int, Sequence[int]]] = None,
                   anchors: Sequence[int] = ()) -> NetworkTopology:
    """Vehicles 1..length connected as a path 1-2-...-length"""
    vehicles = tuple(range(1, length + 1))
    edges = tuple((i, i + 1) for i in range(1, length))
    return NetworkTopology(vehicles=vehicles, anchors=tuple(anchors), edges=edges,
                           anchor_links=dict(anchor_links or {}))
