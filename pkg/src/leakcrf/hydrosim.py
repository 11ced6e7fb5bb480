"""Steady-state hydraulics and leak-scenario simulation.

Pipe friction follows Hazen-Williams, leaks are emitters at junctions
(``q = k * sqrt(pressure head)``), and each 15-minute step of a day is an
independent steady-state solve. The solver is a damped Newton iteration on
pipe flows and junction heads (the global-gradient formulation), with the
heads eliminated through a Schur complement at every step.

Flows are in L/s, heads in meters. A positive pipe flow runs from the first
to the second stored endpoint.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import SensorLayout, WaterNetwork, unreachable_nodes

HW_EXPONENT = 1.852
HW_COEFF = 10.67
STEPS_PER_DAY = 96
STEP_MINUTES = 15
SCENARIO_FORMAT_VERSION = 1

# derivative floor keeps the Schur complement finite on stagnant pipes
_MIN_GRADIENT = 1e-9
# pressure floor (m) for the emitter derivative near zero pressure
_MIN_PRESSURE = 1e-6


class HydraulicError(RuntimeError):
    pass


class ConvergenceError(HydraulicError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UnreachableNodeError(HydraulicError):
    pass


@dataclass(frozen=True)
class DemandPattern:
    id: int
    multipliers: tuple[float, ...]

    def __post_init__(self):
        if len(self.multipliers) != STEPS_PER_DAY:
            raise ValueError(f"pattern {self.id}: need {STEPS_PER_DAY} multipliers, got {len(self.multipliers)}")
        if min(self.multipliers) < 0:
            raise ValueError(f"pattern {self.id}: multipliers must be >= 0")
        mean = sum(self.multipliers) / STEPS_PER_DAY
        if not 0.5 <= mean <= 1.5:
            raise ValueError(f"pattern {self.id}: mean multiplier {mean:.3f} outside [0.5, 1.5]")


@dataclass(frozen=True)
class LeakEvent:
    node: int
    emitter_coeff: float  # L/s per sqrt(m) of pressure head
    start_step: int

    def __post_init__(self):
        if not self.emitter_coeff > 0:
            raise ValueError("emitter_coeff must be > 0")
        if not 0 <= self.start_step < STEPS_PER_DAY:
            raise ValueError(f"start_step must be in [0, {STEPS_PER_DAY - 1}]")


@dataclass(frozen=True)
class Scenario:
    leaks: tuple[LeakEvent, ...] = ()
    seed: int = 0

    def __post_init__(self):
        nodes = [leak.node for leak in self.leaks]
        if len(set(nodes)) != len(nodes):
            raise ValueError("leak nodes must be distinct")

    def active_leaks(self, step: int) -> list[tuple[int, float]]:
        return [(leak.node, leak.emitter_coeff) for leak in self.leaks if step >= leak.start_step]

    def leak_nodes(self, step: int | None = None) -> frozenset[int]:
        if step is None:
            return frozenset(leak.node for leak in self.leaks)
        return frozenset(node for node, _ in self.active_leaks(step))


@dataclass(frozen=True)
class ScenarioConfig:
    max_leaks: int = 3
    size_range: tuple[float, float] = (0.05, 1.0)

    def __post_init__(self):
        lo, hi = self.size_range
        if self.max_leaks < 0:
            raise ValueError("max_leaks must be >= 0")
        if not 0 < lo <= hi:
            raise ValueError("size_range must satisfy 0 < lo <= hi")


@dataclass
class HydraulicState:
    heads: np.ndarray  # per node, m
    flows: np.ndarray  # per pipe, L/s; closed pipes carry 0
    demands: np.ndarray  # per node, L/s
    leak_flows: np.ndarray  # per node, L/s
    iterations: int = 0


@dataclass
class SimulationResult:
    states: list[HydraulicState]
    scenario: Scenario
    labels: np.ndarray  # (steps, nodes) of 0/1
    layout: SensorLayout
    observations: np.ndarray  # (steps, sensors) as recorded, noise included
    noise_sigma: float = 0.0


# -- Hazen-Williams ---------------------------------------------------------


def hw_resistance(length: float, diameter: float, roughness: float) -> float:
    """Resistance ``K`` such that head loss in m is ``K * q**1.852`` for q in L/s."""
    return HW_COEFF * length / (roughness**HW_EXPONENT * diameter**4.8704) * 1e-3**HW_EXPONENT


def hw_headloss(resistance, flow):
    flow = np.asarray(flow, dtype=float)
    return resistance * np.abs(flow) ** (HW_EXPONENT - 1.0) * flow


# -- solver -----------------------------------------------------------------


@dataclass(frozen=True)
class _Topology:
    n_nodes: int
    open_pipes: np.ndarray
    start: np.ndarray
    end: np.ndarray
    resistance: np.ndarray
    junctions: np.ndarray
    junction_pos: np.ndarray  # node -> column among junctions, -1 for sources
    incidence: np.ndarray  # (open pipes, junctions)
    fixed_heads: np.ndarray  # per node, nan on junctions
    elevation: np.ndarray
    tree_parent_pipe: tuple[int, ...] = field(repr=False)
    tree_order: tuple[int, ...] = field(repr=False)


@lru_cache(maxsize=16)
def _topology(net: WaterNetwork) -> _Topology:
    missing = unreachable_nodes(net)
    if missing:
        raise UnreachableNodeError(f"nodes not reachable from a source via open pipes: {missing[:10]}")
    open_pipes = np.array([p.id for p in net.pipes if p.is_open], dtype=np.int64)
    start = np.array([net.pipes[k].endpoints[0] for k in open_pipes], dtype=np.int64)
    end = np.array([net.pipes[k].endpoints[1] for k in open_pipes], dtype=np.int64)
    resistance = np.array(
        [hw_resistance(net.pipes[k].length, net.pipes[k].diameter, net.pipes[k].roughness) for k in open_pipes]
    )
    junctions = np.array(net.junctions, dtype=np.int64)
    pos = np.full(net.n_nodes, -1, dtype=np.int64)
    pos[junctions] = np.arange(len(junctions))
    inc = np.zeros((len(open_pipes), len(junctions)))
    for row, (a, b) in enumerate(zip(start, end)):
        if pos[a] >= 0:
            inc[row, pos[a]] += 1.0
        if pos[b] >= 0:
            inc[row, pos[b]] -= 1.0
    fixed = np.full(net.n_nodes, np.nan)
    for v, h in net.sources.items():
        fixed[v] = h

    # breadth-first spanning forest rooted at the sources, for initial flows
    parent_pipe = [-1] * net.n_nodes
    seen = set(net.sources)
    order = []
    queue = deque(sorted(net.sources))
    incident: list[list[int]] = [[] for _ in range(net.n_nodes)]
    for row, (a, b) in enumerate(zip(start, end)):
        incident[a].append(row)
        incident[b].append(row)
    while queue:
        u = queue.popleft()
        order.append(u)
        for row in incident[u]:
            w = int(end[row] if start[row] == u else start[row])
            if w not in seen:
                seen.add(w)
                parent_pipe[w] = row
                queue.append(w)

    elevation = np.array([n.elevation for n in net.nodes])
    return _Topology(
        net.n_nodes, open_pipes, start, end, resistance, junctions, pos, inc, fixed, elevation,
        tuple(parent_pipe), tuple(order),
    )


def _initial_guess(topo: _Topology, consumption: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Route every node's consumption up the spanning forest; heads follow the tree losses."""
    q = np.zeros(len(topo.open_pipes))
    load = consumption.astype(float).copy()
    for v in reversed(topo.tree_order):
        row = topo.tree_parent_pipe[v]
        if row < 0:
            continue
        parent = topo.start[row] if topo.end[row] == v else topo.end[row]
        q[row] = load[v] if topo.end[row] == v else -load[v]
        load[parent] += load[v]
    in_tree = np.zeros(len(q), dtype=bool)
    in_tree[[r for r in topo.tree_parent_pipe if r >= 0]] = True
    typical = np.mean(np.abs(q[in_tree])) if in_tree.any() else 0.0
    q[~in_tree] = 0.1 * typical

    heads = topo.fixed_heads.copy()
    for v in topo.tree_order:
        row = topo.tree_parent_pipe[v]
        if row < 0:
            continue
        loss = float(hw_headloss(topo.resistance[row], q[row]))
        if topo.end[row] == v:
            heads[v] = heads[topo.start[row]] - loss
        else:
            heads[v] = heads[topo.end[row]] + loss
    return q, heads


def _residuals(topo, q, h_all, demands, emitter):
    dh = h_all[topo.start] - h_all[topo.end]
    r_energy = hw_headloss(topo.resistance, q) - dh
    pressure = h_all - topo.elevation
    leak = emitter * np.sqrt(np.maximum(pressure, 0.0))
    inflow = np.zeros(topo.n_nodes)
    np.add.at(inflow, topo.end, q)
    np.subtract.at(inflow, topo.start, q)
    r_mass = (inflow - demands - leak)[topo.junctions]
    return r_energy, r_mass, leak


def solve_steady_state(
    net: WaterNetwork,
    demands: Sequence[float] | np.ndarray,
    active_leaks: Sequence[tuple[int, float]] = (),
    *,
    tol: float = 1e-6,
    max_iter: int = 200,
    initial_flows: np.ndarray | None = None,
) -> HydraulicState:
    """Solve nodal mass balance and pipe energy balance for one demand snapshot.

    ``tol`` bounds both the nodal imbalance (L/s) and the per-pipe head-loss
    mismatch (m). Iteration continues past ``tol`` towards machine precision
    and stops once progress stalls.
    """
    topo = _topology(net)
    demands = np.asarray(demands, dtype=float)
    if demands.shape != (net.n_nodes,):
        raise ValueError(f"demands must have shape ({net.n_nodes},)")
    if np.any(demands < 0):
        raise ValueError("demands must be >= 0")
    demands = demands.copy()
    demands[list(net.sources)] = 0.0
    emitter = np.zeros(net.n_nodes)
    for node, coeff in active_leaks:
        if node in net.sources:
            raise ValueError(f"leak placed on source node {node}")
        emitter[node] += coeff

    elev = topo.elevation
    q, h_all = _initial_guess(topo, demands + emitter * np.sqrt(np.maximum(topo.fixed_heads[list(net.sources)].max() - elev, 0.0)))
    if initial_flows is not None:
        q = np.asarray(initial_flows, dtype=float)[topo.open_pipes].copy()
    jpos = topo.junctions
    A = topo.incidence

    def merit(r_e, r_m):
        return max(np.max(np.abs(r_e), initial=0.0), np.max(np.abs(r_m), initial=0.0))

    r_e, r_m, _ = _residuals(topo, q, h_all, demands, emitter)
    res = merit(r_e, r_m)
    it = 0
    stall = 0
    while it < max_iter and res > tol * 1e-4 and stall < 3:
        it += 1
        grad = np.maximum(HW_EXPONENT * topo.resistance * np.abs(q) ** (HW_EXPONENT - 1.0), _MIN_GRADIENT)
        pressure = np.maximum(h_all[jpos] - elev[jpos], _MIN_PRESSURE)
        d_leak = np.where(h_all[jpos] - elev[jpos] > 0, emitter[jpos] / (2.0 * np.sqrt(pressure)), 0.0)
        Ag = A / grad[:, None]
        schur = A.T @ Ag + np.diag(d_leak)
        rhs = r_m + Ag.T @ r_e
        try:
            dH = np.linalg.solve(schur, rhs)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian at iteration {it}", res) from exc
        dQ = (A @ dH - r_e) / grad

        step = 1.0
        for _ in range(30):
            q_new = q + step * dQ
            h_new = h_all.copy()
            h_new[jpos] += step * dH
            r_e_new, r_m_new, _ = _residuals(topo, q_new, h_new, demands, emitter)
            res_new = merit(r_e_new, r_m_new)
            if res_new < res or res < tol:
                break
            step *= 0.5
        if res_new >= res:
            stall += 1
            if res < tol:
                break
        else:
            stall = 0
            q, h_all, r_e, r_m, res = q_new, h_new, r_e_new, r_m_new, res_new

    if not res < tol:
        raise ConvergenceError(f"no convergence after {it} iterations, residual {res:.3e}", res)
    _, _, leak = _residuals(topo, q, h_all, demands, emitter)
    flows = np.zeros(net.n_pipes)
    flows[topo.open_pipes] = q
    return HydraulicState(heads=h_all, flows=flows, demands=demands, leak_flows=leak, iterations=it)


def mass_imbalance(net: WaterNetwork, state: HydraulicState) -> np.ndarray:
    """Per-junction |inflow - outflow - demand - leak| in L/s."""
    inflow = np.zeros(net.n_nodes)
    for p in net.pipes:
        a, b = p.endpoints
        inflow[b] += state.flows[p.id]
        inflow[a] -= state.flows[p.id]
    junctions = list(net.junctions)
    return np.abs(inflow - state.demands - state.leak_flows)[junctions]


def headloss_mismatch(net: WaterNetwork, state: HydraulicState) -> np.ndarray:
    """Per open pipe |H_a - H_b - hw_loss(q)| in meters."""
    out = []
    for p in net.pipes:
        if not p.is_open:
            continue
        a, b = p.endpoints
        loss = hw_headloss(hw_resistance(p.length, p.diameter, p.roughness), state.flows[p.id])
        out.append(abs(state.heads[a] - state.heads[b] - float(loss)))
    return np.array(out)


# -- demand patterns --------------------------------------------------------


def default_patterns(n_patterns: int = 3, seed: int = 0) -> list[DemandPattern]:
    """Diurnal residential-style demand curves normalized to mean 1."""
    rng = np.random.default_rng(seed)
    t = np.arange(STEPS_PER_DAY) / STEPS_PER_DAY * 2.0 * math.pi
    patterns = []
    for pid in range(n_patterns):
        morning = rng.uniform(0.3, 0.6)
        evening = rng.uniform(0.2, 0.5)
        shift = rng.uniform(-0.3, 0.3)
        curve = 1.0 + morning * np.sin(t - 1.9 + shift) + evening * np.sin(2.0 * t - 2.4 + shift)
        curve += rng.normal(0.0, 0.03, STEPS_PER_DAY)
        curve = np.clip(curve, 0.05, None)
        curve /= curve.mean()
        patterns.append(DemandPattern(pid, tuple(round(float(c), 6) for c in curve)))
    return patterns


def demands_at(net: WaterNetwork, patterns: Sequence[DemandPattern], step: int) -> np.ndarray:
    by_id = {p.id: p for p in patterns}
    out = np.zeros(net.n_nodes)
    for node in net.nodes:
        pattern = by_id.get(node.demand_pattern_id)
        if pattern is None:
            raise KeyError(f"node {node.id}: unknown demand pattern {node.demand_pattern_id}")
        out[node.id] = node.base_demand * pattern.multipliers[step]
    return out


def save_patterns(patterns: Sequence[DemandPattern], path: str | Path) -> None:
    data = {
        "format_version": SCENARIO_FORMAT_VERSION,
        "patterns": [{"id": p.id, "multipliers": list(p.multipliers)} for p in patterns],
    }
    Path(path).write_text(json.dumps(data) + "\n")


def load_patterns(path: str | Path) -> list[DemandPattern]:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != SCENARIO_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {data.get('format_version')!r}")
    return [DemandPattern(int(p["id"]), tuple(float(m) for m in p["multipliers"])) for p in data["patterns"]]


# -- scenarios and simulation -----------------------------------------------


def generate_scenario(net: WaterNetwork, config: ScenarioConfig, seed: int) -> Scenario:
    junctions = np.array(net.junctions)
    if config.max_leaks > len(junctions):
        raise ValueError(f"max_leaks={config.max_leaks} exceeds junction count {len(junctions)}")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(0, config.max_leaks + 1))
    nodes = rng.choice(junctions, size=count, replace=False)
    sizes = rng.uniform(*config.size_range, size=count)
    starts = rng.integers(0, STEPS_PER_DAY, size=count)
    leaks = tuple(
        LeakEvent(int(v), round(float(k), 6), int(s)) for v, k, s in zip(nodes, sizes, starts)
    )
    return Scenario(leaks=leaks, seed=seed)


def observe(net: WaterNetwork, state: HydraulicState, layout: SensorLayout) -> np.ndarray:
    """Pressure heads (m) at pressure sensors, then signed flows (L/s) at flow sensors."""
    ps = list(layout.pressure_sensors)
    fs = list(layout.flow_sensors)
    elevation = np.array([net.nodes[v].elevation for v in ps])
    return np.concatenate([state.heads[ps] - elevation, state.flows[fs]])


def simulate_step(
    net: WaterNetwork,
    scenario: Scenario,
    patterns: Sequence[DemandPattern],
    step: int,
    initial_flows: np.ndarray | None = None,
) -> HydraulicState:
    demands = demands_at(net, patterns, step)
    try:
        return solve_steady_state(net, demands, scenario.active_leaks(step), initial_flows=initial_flows)
    except ConvergenceError as exc:
        raise ConvergenceError(f"step {step}: {exc}", exc.residual) from exc


def simulate(
    net: WaterNetwork,
    scenario: Scenario,
    patterns: Sequence[DemandPattern],
    layout: SensorLayout,
    noise_sigma: float = 0.0,
) -> SimulationResult:
    """Run all 96 steps of one day; labels mark leaks active at each step."""
    layout.validate(net)
    by_id = {p.id for p in patterns}
    for node in net.nodes:
        if node.demand_pattern_id not in by_id:
            raise KeyError(f"node {node.id}: unknown demand pattern {node.demand_pattern_id}")
    states = []
    labels = np.zeros((STEPS_PER_DAY, net.n_nodes), dtype=np.int8)
    flows = None
    for t in range(STEPS_PER_DAY):
        state = simulate_step(net, scenario, patterns, t, initial_flows=flows)
        flows = state.flows
        states.append(state)
        for node in scenario.leak_nodes(t):
            labels[t, node] = 1
    obs = np.array([observe(net, s, layout) for s in states]).reshape(STEPS_PER_DAY, layout.dim)
    if noise_sigma > 0:
        rng = np.random.default_rng([scenario.seed, 1])
        obs = obs + rng.normal(0.0, noise_sigma, size=obs.shape)
    return SimulationResult(states, scenario, labels, layout, obs, noise_sigma)


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "format_version": SCENARIO_FORMAT_VERSION,
        "seed": scenario.seed,
        "leaks": [asdict(leak) for leak in scenario.leaks],
    }


def scenario_from_dict(data: dict) -> Scenario:
    if data.get("format_version") != SCENARIO_FORMAT_VERSION:
        raise ValueError(f"unsupported scenario format_version {data.get('format_version')!r}")
    return Scenario(tuple(LeakEvent(**leak) for leak in data["leaks"]), int(data["seed"]))


def save_simulation(result: SimulationResult, directory: str | Path) -> None:
    """Write observations.csv, labels.csv and scenario.json into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "observations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *result.layout.sensor_names])
        for t, row in enumerate(result.observations):
            writer.writerow([t, *(repr(float(x)) for x in row)])
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *(f"n{v}" for v in range(result.labels.shape[1]))])
        for t, row in enumerate(result.labels):
            writer.writerow([t, *row.tolist()])
    manifest = scenario_to_dict(result.scenario)
    manifest["noise_sigma"] = result.noise_sigma
    manifest["layout"] = {
        "pressure_sensors": list(result.layout.pressure_sensors),
        "flow_sensors": list(result.layout.flow_sensors),
    }
    (out / "scenario.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_observations(directory: str | Path) -> tuple[SensorLayout, np.ndarray, np.ndarray, Scenario]:
    """Read back (layout, observations, labels, scenario) written by :func:`save_simulation`."""
    src = Path(directory)
    manifest = json.loads((src / "scenario.json").read_text())
    layout = SensorLayout(
        tuple(manifest["layout"]["pressure_sensors"]), tuple(manifest["layout"]["flow_sensors"])
    )
    obs = np.loadtxt(src / "observations.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    labels = np.loadtxt(src / "labels.csv", delimiter=",", skiprows=1, ndmin=2, dtype=np.int64)[:, 1:]
    return layout, obs, labels.astype(np.int8), scenario_from_dict(manifest)
