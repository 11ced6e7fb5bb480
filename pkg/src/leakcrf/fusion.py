"""Human-report fusion through hard high-order clique potentials.

Each report defines a clique of the junctions lying strictly within radius
``gamma`` of its location. A clique costs nothing when it contains at least
one predicted leak and infinite energy otherwise. The greedy update walks
over the cliques and, for every unsatisfied one, adds its most uncertain
member to the leak set provided that member's label entropy exceeds the
gate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import entr

from .hydrosim import STEPS_PER_DAY, Scenario
from .network import WaterNetwork

log = logging.getLogger(__name__)

LeakSet = frozenset


@dataclass(frozen=True)
class HumanReport:
    location: tuple[float, float]
    step: int

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.location):
            raise ValueError("report location must be finite")


@dataclass(frozen=True)
class ReportClique:
    location: tuple[float, float]
    members: frozenset[int]
    step: int = 0


@dataclass
class CliqueSet:
    cliques: list[ReportClique] = field(default_factory=list)
    dropped: int = 0

    def __iter__(self):
        return iter(self.cliques)

    def __len__(self) -> int:
        return len(self.cliques)


@dataclass(frozen=True)
class ReportSimConfig:
    p_report: float = 0.7
    location_noise_sigma: float = 0.5  # meters
    gamma: float = 2.0  # meters
    false_report_rate: float = 0.0  # spurious reports per simulated day

    def __post_init__(self):
        if not 0.0 <= self.p_report <= 1.0:
            raise ValueError("p_report must be in [0, 1]")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.location_noise_sigma >= 0:
            raise ValueError("location_noise_sigma must be >= 0")
        if not self.false_report_rate >= 0:
            raise ValueError("false_report_rate must be >= 0")


@dataclass(frozen=True)
class FusionConfig:
    entropy_gate: float = 0.0  # nats

    def __post_init__(self):
        if not self.entropy_gate >= 0:
            raise ValueError("entropy_gate must be >= 0")


@dataclass(frozen=True)
class AuditEntry:
    clique: int
    node: int | None
    entropy: float


@dataclass
class FusionResult:
    leaks: frozenset[int]
    audit: list[AuditEntry]
    unresolved: int

    def labels(self, n_nodes: int) -> np.ndarray:
        y = np.zeros(n_nodes, dtype=np.int8)
        y[sorted(self.leaks)] = 1
        return y


def simulate_reports(scenario: Scenario, net: WaterNetwork, config: ReportSimConfig, seed: int) -> list[HumanReport]:
    """Draw human reports for the leaks of ``scenario`` plus spurious ones.

    Every leak consumes the same random draws whatever ``p_report`` is, so
    two runs with the same seed and a higher ``p_report`` produce a superset
    of the reports.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for leak in scenario.leaks:
        u = rng.random()
        offset = rng.normal(0.0, 1.0, size=2) * config.location_noise_sigma
        step = int(rng.integers(leak.start_step, STEPS_PER_DAY))
        if u < config.p_report:
            x, y = net.nodes[leak.node].coord
            reports.append(HumanReport((float(x + offset[0]), float(y + offset[1])), step))
    n_false = int(rng.poisson(config.false_report_rate))
    if n_false:
        lo = net.coords.min(axis=0)
        hi = net.coords.max(axis=0)
        for _ in range(n_false):
            loc = rng.uniform(lo, hi)
            reports.append(HumanReport((float(loc[0]), float(loc[1])), int(rng.integers(STEPS_PER_DAY))))
    return reports


def build_cliques(reports: Iterable[HumanReport], net: WaterNetwork, gamma: float) -> CliqueSet:
    """One clique per report: nodes at Euclidean distance strictly below ``gamma``."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    out = CliqueSet()
    coords = net.coords
    for report in reports:
        dist = np.hypot(coords[:, 0] - report.location[0], coords[:, 1] - report.location[1])
        members = frozenset(int(v) for v in np.flatnonzero(dist < gamma))
        if members:
            out.cliques.append(ReportClique(report.location, members, report.step))
        else:
            out.dropped += 1
            log.info("report at %s matched no node within %.3g m; dropped", report.location, gamma)
    return out


def _members(clique) -> frozenset[int]:
    return clique.members if isinstance(clique, ReportClique) else frozenset(clique)


def high_order_potential(clique, leak_set: Iterable[int]) -> float:
    """0 if the clique holds a predicted leak, +inf otherwise."""
    members = _members(clique)
    if not members:
        raise ValueError("clique must be nonempty")
    return 0.0 if not members.isdisjoint(leak_set) else math.inf


def entropy(p1):
    """Binary label entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(p1, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probability must be in [0, 1]")
    h = entr(p) + entr(1.0 - p)
    return float(h) if h.ndim == 0 else h


def unsatisfied(cliques: Iterable, leak_set: Iterable[int]) -> int:
    s = frozenset(leak_set)
    return sum(1 for c in cliques if _members(c).isdisjoint(s))


def _marginal(marginals, v: int) -> float:
    if isinstance(marginals, Mapping):
        if v not in marginals:
            raise KeyError(f"no marginal for clique member {v}")
        return float(marginals[v])
    if not 0 <= v < len(marginals):
        raise KeyError(f"no marginal for clique member {v}")
    return float(marginals[v])


def greedy_fuse(
    leak_set: Iterable[int],
    cliques: CliqueSet | Sequence[ReportClique],
    marginals: Mapping[int, float] | Sequence[float] | np.ndarray,
    config: FusionConfig = FusionConfig(),
) -> FusionResult:
    """Add the highest-entropy member of each unsatisfied clique when it clears the gate.

    Cliques are visited by report step, then by smallest member id. Entropy
    ties go to the smallest node id. Cliques whose best member does not
    clear the gate are counted in ``unresolved`` and left as they are.
    """
    s = set(leak_set)
    items = list(cliques)
    order = sorted(range(len(items)), key=lambda i: (items[i].step, min(items[i].members), i))
    audit = []
    unresolved = 0
    for i in order:
        members = items[i].members
        if not members.isdisjoint(s):
            continue
        best, best_h = None, -math.inf
        for v in sorted(members):
            h = entropy(_marginal(marginals, v))
            if h > best_h:
                best, best_h = v, h
        if best_h > config.entropy_gate:
            s.add(best)
            audit.append(AuditEntry(i, best, best_h))
        else:
            unresolved += 1
            audit.append(AuditEntry(i, None, best_h))
    return FusionResult(frozenset(s), audit, unresolved)


# -- persistence ------------------------------------------------------------


def save_reports(reports: Sequence[HumanReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "x", "y"])
        for r in reports:
            writer.writerow([r.step, repr(r.location[0]), repr(r.location[1])])


def load_reports(path: str | Path) -> list[HumanReport]:
    with open(path, newline="") as fh:
        return [HumanReport((float(row["x"]), float(row["y"])), int(row["step"])) for row in csv.DictReader(fh)]


def save_fusion(result: FusionResult, n_nodes: int, labels_path: str | Path, audit_path: str | Path) -> None:
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "label"])
        for v, label in enumerate(result.labels(n_nodes)):
            writer.writerow([v, int(label)])
    with open(audit_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clique", "node", "entropy"])
        for e in result.audit:
            writer.writerow([e.clique, "" if e.node is None else e.node, repr(e.entropy)])
