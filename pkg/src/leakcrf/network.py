"""Water-network graph model, its JSON file format, and a benchmark generator.

File format (``format_version: 1``)::

    {
      "format_version": 1,
      "nodes":   [{"id": 0, "coord": [x, y], "elevation": z,
                   "base_demand": d, "demand_pattern_id": 0}, ...],
      "pipes":   [{"id": 0, "endpoints": [a, b], "length": L, "diameter": D,
                   "roughness": C, "status": "open"}, ...],
      "sources": [{"node": 0, "head": H}, ...]
    }

Units: meters for coordinates, elevations, lengths, diameters and heads;
liters/second for demands. Roughness is the Hazen-Williams coefficient.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np

FORMAT_VERSION = 1
ROUGHNESS_RANGE = (50.0, 200.0)


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed."""


class NetworkValidationError(ValueError):
    """Raised when a network violates a structural invariant."""


@dataclass(frozen=True)
class NodeRecord:
    id: int
    coord: tuple[float, float]
    elevation: float
    base_demand: float
    demand_pattern_id: int = 0


@dataclass(frozen=True)
class PipeRecord:
    id: int
    endpoints: tuple[int, int]
    length: float
    diameter: float
    roughness: float
    status: str = "open"

    @property
    def is_open(self) -> bool:
        return self.status == "open"


@dataclass(frozen=True)
class WaterNetwork:
    """Immutable undirected pipe network.

    ``sources`` maps node id to its fixed hydraulic head in meters.
    """

    nodes: tuple[NodeRecord, ...]
    pipes: tuple[PipeRecord, ...]
    sources: dict[int, float]

    def __hash__(self) -> int:
        return hash((self.nodes, self.pipes, tuple(sorted(self.sources.items()))))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WaterNetwork):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.pipes == other.pipes
            and self.sources == other.sources
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_pipes(self) -> int:
        return len(self.pipes)

    @cached_property
    def junctions(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.id not in self.sources)

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([n.coord for n in self.nodes], dtype=float).reshape(-1, 2)

    @cached_property
    def edges(self) -> np.ndarray:
        """Endpoint pairs of open pipes, shape (m_open, 2)."""
        pairs = [p.endpoints for p in self.pipes if p.is_open]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def adjacency(self) -> tuple[frozenset[int], ...]:
        adj: list[set[int]] = [set() for _ in self.nodes]
        for a, b in self.edges:
            adj[a].add(int(b))
            adj[b].add(int(a))
        return tuple(frozenset(s) for s in adj)

    def hop_distances(self, v: int) -> dict[int, int]:
        """BFS hop counts from ``v`` over open pipes."""
        dist = {v: 0}
        queue = deque([v])
        while queue:
            u = queue.popleft()
            for w in self.adjacency[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


@dataclass(frozen=True)
class SensorLayout:
    """Pressure sensors sit on nodes, flow sensors on pipes; order matters."""

    pressure_sensors: tuple[int, ...]
    flow_sensors: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return len(self.pressure_sensors) + len(self.flow_sensors)

    @property
    def sensor_names(self) -> list[str]:
        return [f"p{v}" for v in self.pressure_sensors] + [f"q{e}" for e in self.flow_sensors]

    @property
    def key(self) -> str:
        return ",".join(self.sensor_names)

    @classmethod
    def full(cls, net: WaterNetwork) -> SensorLayout:
        return cls(tuple(n.id for n in net.nodes), tuple(p.id for p in net.pipes))

    def validate(self, net: WaterNetwork) -> None:
        for v in self.pressure_sensors:
            if not 0 <= v < net.n_nodes:
                raise NetworkValidationError(f"pressure sensor on unknown node {v}")
        for e in self.flow_sensors:
            if not 0 <= e < net.n_pipes:
                raise NetworkValidationError(f"flow sensor on unknown pipe {e}")
        if len(set(self.pressure_sensors)) != len(self.pressure_sensors):
            raise NetworkValidationError("duplicate pressure sensor")
        if len(set(self.flow_sensors)) != len(self.flow_sensors):
            raise NetworkValidationError("duplicate flow sensor")


def validate_network(net: WaterNetwork) -> None:
    """Check the structural invariants; raise NetworkValidationError on the first violation."""
    seen: set[int] = set()
    for node in net.nodes:
        if node.id in seen:
            raise NetworkValidationError(f"duplicate node id {node.id}")
        seen.add(node.id)
    if seen != set(range(len(net.nodes))):
        raise NetworkValidationError("node ids must be contiguous from 0")
    for i, node in enumerate(net.nodes):
        if node.id != i:
            raise NetworkValidationError(f"node {node.id} listed out of order at position {i}")
        if not math.isfinite(node.elevation):
            raise NetworkValidationError(f"node {node.id}: elevation must be finite")
        if not all(math.isfinite(c) for c in node.coord):
            raise NetworkValidationError(f"node {node.id}: coord must be finite")
        if not node.base_demand >= 0:
            raise NetworkValidationError(f"node {node.id}: base_demand must be >= 0")

    seen.clear()
    for pipe in net.pipes:
        if pipe.id in seen:
            raise NetworkValidationError(f"duplicate pipe id {pipe.id}")
        seen.add(pipe.id)
        a, b = pipe.endpoints
        if a == b:
            raise NetworkValidationError(f"pipe {pipe.id}: endpoints must be distinct")
        for v in (a, b):
            if not 0 <= v < len(net.nodes):
                raise NetworkValidationError(f"pipe {pipe.id}: unknown endpoint node {v}")
        if not pipe.length > 0:
            raise NetworkValidationError(f"pipe {pipe.id}: length must be > 0")
        if not pipe.diameter > 0:
            raise NetworkValidationError(f"pipe {pipe.id}: diameter must be > 0")
        lo, hi = ROUGHNESS_RANGE
        if not lo <= pipe.roughness <= hi:
            raise NetworkValidationError(f"pipe {pipe.id}: roughness {pipe.roughness} outside [{lo}, {hi}]")
        if pipe.status not in ("open", "closed"):
            raise NetworkValidationError(f"pipe {pipe.id}: status must be open or closed")
    if seen != set(range(len(net.pipes))):
        raise NetworkValidationError("pipe ids must be contiguous from 0")
    for i, pipe in enumerate(net.pipes):
        if pipe.id != i:
            raise NetworkValidationError(f"pipe {pipe.id} listed out of order at position {i}")

    if not net.sources:
        raise NetworkValidationError("network needs at least one source")
    for v, head in net.sources.items():
        if not 0 <= v < len(net.nodes):
            raise NetworkValidationError(f"source on unknown node {v}")
        if not math.isfinite(head):
            raise NetworkValidationError(f"source {v}: head must be finite")


def unreachable_nodes(net: WaterNetwork) -> list[int]:
    """Nodes with no open-pipe path to any source."""
    seen = set(net.sources)
    queue = deque(net.sources)
    while queue:
        u = queue.popleft()
        for w in net.adjacency[u]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return [v for v in range(net.n_nodes) if v not in seen]


def neighbors(net: WaterNetwork, v: int) -> set[int]:
    """Nodes sharing an open pipe with ``v``."""
    if not 0 <= v < net.n_nodes:
        raise IndexError(f"invalid node id {v}")
    return set(net.adjacency[v])


# -- serialization ----------------------------------------------------------


def network_to_dict(net: WaterNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "nodes": [
            {
                "id": n.id,
                "coord": list(n.coord),
                "elevation": n.elevation,
                "base_demand": n.base_demand,
                "demand_pattern_id": n.demand_pattern_id,
            }
            for n in net.nodes
        ],
        "pipes": [
            {
                "id": p.id,
                "endpoints": list(p.endpoints),
                "length": p.length,
                "diameter": p.diameter,
                "roughness": p.roughness,
                "status": p.status,
            }
            for p in net.pipes
        ],
        "sources": [{"node": v, "head": h} for v, h in sorted(net.sources.items())],
    }


def dumps_network(net: WaterNetwork) -> str:
    return json.dumps(network_to_dict(net), indent=1) + "\n"


def save_network(net: WaterNetwork, path: str | Path) -> None:
    Path(path).write_text(dumps_network(net))


def _field(record: dict, name: str, kind: type, where: str):
    if name not in record:
        raise NetworkFormatError(f"{where}: missing field '{name}'")
    value = record[name]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise NetworkFormatError(f"{where}.{name}: expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise NetworkFormatError(f"{where}.{name}: expected an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise NetworkFormatError(f"{where}.{name}: expected a string, got {value!r}")
        return value
    raise TypeError(kind)


def _pair(record: dict, name: str, kind: type, where: str) -> tuple:
    value = record.get(name)
    if not isinstance(value, list) or len(value) != 2:
        raise NetworkFormatError(f"{where}.{name}: expected a 2-element list, got {value!r}")
    return tuple(_field({name: x}, name, kind, where) for x in value)


def network_from_dict(data: dict) -> WaterNetwork:
    if not isinstance(data, dict):
        raise NetworkFormatError("top level must be an object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise NetworkFormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    for section in ("nodes", "pipes", "sources"):
        if not isinstance(data.get(section), list):
            raise NetworkFormatError(f"missing or malformed section '{section}'")

    nodes = []
    for i, rec in enumerate(data["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(rec, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        nodes.append(
            NodeRecord(
                id=_field(rec, "id", int, where),
                coord=_pair(rec, "coord", float, where),
                elevation=_field(rec, "elevation", float, where),
                base_demand=_field(rec, "base_demand", float, where),
                demand_pattern_id=_field(rec, "demand_pattern_id", int, where),
            )
        )
    pipes = []
    for i, rec in enumerate(data["pipes"]):
        where = f"pipes[{i}]"
        if not isinstance(rec, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        pipes.append(
            PipeRecord(
                id=_field(rec, "id", int, where),
                endpoints=_pair(rec, "endpoints", int, where),
                length=_field(rec, "length", float, where),
                diameter=_field(rec, "diameter", float, where),
                roughness=_field(rec, "roughness", float, where),
                status=_field(rec, "status", str, where),
            )
        )
    sources: dict[int, float] = {}
    for i, rec in enumerate(data["sources"]):
        where = f"sources[{i}]"
        if not isinstance(rec, dict):
            raise NetworkFormatError(f"{where}: expected an object")
        node = _field(rec, "node", int, where)
        if node in sources:
            raise NetworkValidationError(f"duplicate source node {node}")
        sources[node] = _field(rec, "head", float, where)

    net = WaterNetwork(tuple(nodes), tuple(pipes), sources)
    validate_network(net)
    return net


def loads_network(text: str) -> WaterNetwork:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(data)


def load_network(path: str | Path) -> WaterNetwork:
    path = Path(path)
    try:
        return loads_network(path.read_text())
    except NetworkFormatError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc


# -- benchmark generator ----------------------------------------------------

GRID_SPACING = 1.5  # meters between street-grid junctions
LENGTH_SCALE = 100.0  # hydraulic pipe length per meter of schematic distance
STANDARD_DIAMETERS = (0.05, 0.065, 0.08, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.4)
LOOP_DIAMETERS = (0.05, 0.065)
DESIGN_VELOCITY = 0.8  # m/s at peak flow
PEAK_FACTOR = 1.5
ROUGHNESS_CHOICES = (100.0, 110.0, 120.0, 130.0, 140.0)
N_PATTERNS = 3


def generate_benchmark_network(n_nodes: int, seed: int) -> WaterNetwork:
    """Build a connected, looped street-grid network of ``n_nodes`` junctions.

    Nodes sit on a jittered square grid with ``GRID_SPACING`` meter pitch so
    that report radii of a few meters cover a handful of junctions. Pipes
    form a random spanning tree of the 8-neighbour grid graph plus loop
    closures until the mean degree is about 2.5 (always within [2, 3]).
    Networks with 20 or more nodes get two fixed-head sources and one
    closed (valved) loop pipe.
    """
    if n_nodes < 3:
        raise ValueError(f"n_nodes must be >= 3, got {n_nodes}")
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_nodes))
    cells = [(i // cols, i % cols) for i in range(n_nodes)]
    cell_index = {c: i for i, c in enumerate(cells)}

    jitter = rng.uniform(-0.2, 0.2, size=(n_nodes, 2)) * GRID_SPACING
    coords = np.array([(c * GRID_SPACING, r * GRID_SPACING) for r, c in cells]) + jitter
    coords = np.round(coords, 3)

    candidates = []
    for i, (r, c) in enumerate(cells):
        for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
            j = cell_index.get((r + dr, c + dc))
            if j is not None:
                candidates.append((min(i, j), max(i, j)))
    candidates.sort()

    g = nx.Graph()
    g.add_nodes_from(range(n_nodes))
    weights = rng.random(len(candidates))
    for (a, b), wgt in zip(candidates, weights):
        diagonal = cells[a][0] != cells[b][0] and cells[a][1] != cells[b][1]
        g.add_edge(a, b, weight=wgt + (1.0 if diagonal else 0.0))
    tree = sorted(tuple(sorted(e)) for e in nx.minimum_spanning_edges(g, data=False))
    tree_set = set(tree)

    target = min(max(n_nodes, round(1.25 * n_nodes)), (3 * n_nodes) // 2, len(candidates))
    extra_pool = [e for e in candidates if e not in tree_set]
    order = rng.permutation(len(extra_pool))
    extras = sorted(extra_pool[k] for k in order[: target - len(tree)])

    n_sources = 2 if n_nodes >= 20 else 1
    if n_sources == 1:
        source_nodes = [0]
    else:
        source_nodes = [0, n_nodes - 1]

    # smooth terrain sloping away from the first source
    span = coords.max(axis=0) - coords.min(axis=0) + 1e-9
    rel = (coords - coords.min(axis=0)) / span
    elevation = 10.0 + 6.0 * rel[:, 0] - 4.0 * rel[:, 1] + rng.normal(0.0, 0.5, n_nodes)
    elevation = np.round(elevation, 2)

    nodes = []
    for i in range(n_nodes):
        demand = 0.0 if i in source_nodes else round(float(rng.uniform(0.2, 0.8)), 3)
        nodes.append(
            NodeRecord(
                id=i,
                coord=(float(coords[i, 0]), float(coords[i, 1])),
                elevation=float(elevation[i]),
                base_demand=demand,
                demand_pattern_id=int(rng.integers(N_PATTERNS)),
            )
        )

    design = _tree_design_flows(n_nodes, tree, source_nodes[0], [n.base_demand for n in nodes])
    closed = extras[int(rng.integers(len(extras)))] if n_nodes >= 20 and extras else None
    pipes = []
    for k, (a, b) in enumerate(sorted(tree + extras)):
        dist = float(np.linalg.norm(coords[a] - coords[b]))
        if (a, b) in tree_set:
            diam = _size_diameter(PEAK_FACTOR * design[(a, b)])
        else:
            diam = rng.choice(LOOP_DIAMETERS)
        pipes.append(
            PipeRecord(
                id=k,
                endpoints=(a, b),
                length=round(LENGTH_SCALE * dist * float(rng.uniform(0.9, 1.1)), 1),
                diameter=float(diam),
                roughness=float(rng.choice(ROUGHNESS_CHOICES)),
                status="closed" if (a, b) == closed else "open",
            )
        )

    top = float(elevation.max())
    sources = {v: round(top + 45.0 - 3.0 * k, 2) for k, v in enumerate(source_nodes)}
    net = WaterNetwork(tuple(nodes), tuple(pipes), sources)
    validate_network(net)
    return net


def _tree_design_flows(n_nodes, tree, root, demands) -> dict[tuple[int, int], float]:
    """Demand (L/s) carried by each tree pipe when the whole tree is fed from ``root``."""
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for a, b in tree:
        adj[a].append(b)
        adj[b].append(a)
    parent = [-1] * n_nodes
    order = [root]
    seen = {root}
    for u in order:
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                parent[w] = u
                order.append(w)
    load = list(demands)
    flows = {}
    for v in reversed(order[1:]):
        u = parent[v]
        flows[(min(u, v), max(u, v))] = load[v]
        load[u] += load[v]
    return flows


def _size_diameter(flow_lps: float) -> float:
    """Smallest standard diameter keeping velocity at or below the design velocity."""
    for d in STANDARD_DIAMETERS:
        if flow_lps * 1e-3 <= DESIGN_VELOCITY * math.pi * d * d / 4.0:
            return d
    return STANDARD_DIAMETERS[-1]
