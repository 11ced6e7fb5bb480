import numpy as np
import pytest

from leakcrf.network import NodeRecord, PipeRecord, WaterNetwork


def line_network(n=3, head=50.0, demand=0.0, length=100.0, diameter=0.1, roughness=120.0):
    """Source at node 0 feeding a straight chain of junctions 1 m apart."""
    nodes = tuple(NodeRecord(i, (float(i), 0.0), 0.0, 0.0 if i == 0 else demand) for i in range(n))
    pipes = tuple(PipeRecord(i, (i, i + 1), length, diameter, roughness) for i in range(n - 1))
    return WaterNetwork(nodes, pipes, {0: head})


def random_graph(n, rng, p_extra=0.3):
    """Connected random graph as a bare edge array (spanning tree plus extras)."""
    edges = set()
    for v in range(1, n):
        edges.add((int(rng.integers(0, v)), v))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < p_extra / max(n - 1, 1) * 2:
                edges.add((a, b))
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def graph_network(n, edges):
    nodes = tuple(NodeRecord(i, (float(i), 0.0), 0.0, 0.0) for i in range(n))
    pipes = tuple(PipeRecord(i, (int(a), int(b)), 100.0, 0.1, 120.0) for i, (a, b) in enumerate(edges))
    return WaterNetwork(nodes, pipes, {0: 10.0})


@pytest.fixture
def line3():
    return line_network(3)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(name, passed, detail=""):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
