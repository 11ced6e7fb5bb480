"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from conftest import graph_network, random_graph, report_criterion
from leakcrf.crf import CrfModel, _all_labelings, brute_force_infer, energy, loss_augmented_infer, map_infer
from leakcrf.fusion import FusionConfig, ReportClique, entropy, greedy_fuse, high_order_potential, unsatisfied
from leakcrf.harness import ExperimentConfig, results_table, run_experiment
from leakcrf.hydrosim import STEPS_PER_DAY, default_patterns, demands_at, headloss_mismatch, mass_imbalance, solve_steady_state
from leakcrf.network import NodeRecord, PipeRecord, WaterNetwork, generate_benchmark_network
from leakcrf.ssvm import TrainingConfig, TrainingSample, objective, structured_hinge_loss, subgradient, train

N_MASTER_SEEDS = 20


def random_model(rng, n):
    return CrfModel(rng.normal(size=14)), graph_network(n, random_graph(n, rng)), rng.normal(size=(n, 5))


def test_inference_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_sub = cut_ok = icm_ok = 0
    for _ in range(100):
        model, net, F = random_model(rng, int(rng.integers(2, 13)))
        e_bf = energy(model, net, F, brute_force_infer(model, net, F))
        if model.is_submodular():
            n_sub += 1
            cut_ok += energy(model, net, F, map_infer(model, net, F, method="mincut")) == pytest.approx(e_bf, abs=1e-9)
        icm_ok += energy(model, net, F, map_infer(model, net, F, method="icm")) <= e_bf + 1e-9

    aug_ok = 0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        model, net, F = random_model(rng, n)
        y = rng.integers(0, 2, n)
        best = max(np.sum(yy != y) - energy(model, net, F, yy) for yy in _all_labelings(n))
        y_hat = loss_augmented_infer(model, net, F, y)
        aug_ok += np.sum(y_hat != y) - energy(model, net, F, y_hat) == pytest.approx(best, abs=1e-9)
    elapsed = time.perf_counter() - t0

    passed = cut_ok == n_sub and icm_ok >= 95 and aug_ok == 100 and elapsed < 30
    detail = f"min-cut {cut_ok}/{n_sub} submodular, ICM {icm_ok}/100, loss-augmented {aug_ok}/100, {elapsed:.1f}s"
    assert report_criterion("inference oracle equivalence", passed, detail)


def test_hydraulics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_mass = worst_loss = 0.0
    for seed in range(1000):
        net = generate_benchmark_network(int(rng.integers(3, 121)), seed)
        d = demands_at(net, default_patterns(seed=seed), int(rng.integers(STEPS_PER_DAY)))
        n_leaks = min(int(rng.integers(0, 4)), len(net.junctions))
        nodes = rng.choice(net.junctions, n_leaks, replace=False)
        state = solve_steady_state(net, d, [(int(v), float(rng.uniform(0.05, 1.0))) for v in nodes])
        worst_mass = max(worst_mass, float(mass_imbalance(net, state).max(initial=0.0)))
        worst_loss = max(worst_loss, float(headloss_mismatch(net, state).max(initial=0.0)))

    nodes = (NodeRecord(0, (0.0, 0.0), 0.0, 0.0), NodeRecord(1, (10.0, 0.0), 0.0, 10.0))
    pipe_net = WaterNetwork(nodes, (PipeRecord(0, (0, 1), 1000.0, 0.2, 120.0),), {0: 50.0})
    analytic = 50.0 - 10.67 * 1000.0 * 0.010**1.852 / (120.0**1.852 * 0.2**4.8704)
    pipe_err = abs(solve_steady_state(pipe_net, [0.0, 10.0]).heads[1] - analytic)
    elapsed = time.perf_counter() - t0

    passed = worst_mass < 1e-6 and worst_loss < 1e-6 and pipe_err < 1e-4 and elapsed < 60
    detail = f"max imbalance {worst_mass:.1e} L/s, max head-loss mismatch {worst_loss:.1e} m, single pipe {pipe_err:.1e} m, {elapsed:.1f}s"
    assert report_criterion("hydraulic invariants over 1000 networks", passed, detail)


def test_training_separable():
    rng = np.random.default_rng(3)
    net = graph_network(8, random_graph(8, rng))
    samples = []
    for _ in range(40):
        f = rng.choice([-1.0, 1.0], size=8)
        feats = np.zeros((8, 5))
        feats[:, 0] = f
        feats[:, 4] = 1.0
        samples.append(TrainingSample(feats, (f > 0).astype(np.int8)))
    model = train(samples, net, TrainingConfig(calibration_fraction=0.0))
    per = sum(structured_hinge_loss(model, net, s, method="brute") for s in samples) / (8 * len(samples))
    assert report_criterion("separable training hinge", per <= 1e-3, f"{per:.2e} per node per sample")


def test_training_subgradient():
    rng = np.random.default_rng(11)
    net = graph_network(8, random_graph(8, rng))
    samples = [TrainingSample(rng.normal(size=(8, 5)), rng.integers(0, 2, 8).astype(np.int8)) for _ in range(4)]
    w = rng.normal(size=14)
    g = subgradient(w, net, samples, 0.25)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        d = rng.normal(size=14)
        d /= np.linalg.norm(d)
        fd = (objective(w + h * d, net, samples, 0.25) - objective(w - h * d, net, samples, 0.25)) / (2 * h)
        worst = max(worst, abs(fd - g @ d))
    assert report_criterion("subgradient vs finite differences", worst < 1e-4, f"max gap {worst:.1e} over 20 directions")


def test_fusion_correctness():
    table = [
        (frozenset({3, 4}), {3}, 0.0),
        (frozenset({4, 5}), set(), math.inf),
        (frozenset({1}), {1, 2, 9}, 0.0),
        (frozenset({1, 2}), {3}, math.inf),
    ]
    table_ok = all(high_order_potential(c, s) == e for c, s, e in table)
    ln2_err = abs(entropy(0.5) - math.log(2))

    rng = np.random.default_rng(99)
    violations = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        marg = rng.random(n)
        if rng.random() < 0.2:
            marg[rng.random(n) < 0.3] = rng.choice([0.0, 1.0])
        s0 = {int(v) for v in np.flatnonzero(rng.random(n) < 0.15)}
        cliques = [
            ReportClique((0.0, 0.0), frozenset(int(v) for v in rng.choice(n, int(rng.integers(1, min(n, 6) + 1)), replace=False)), int(rng.integers(STEPS_PER_DAY)))
            for _ in range(int(rng.integers(0, 10)))
        ]
        result = greedy_fuse(s0, cliques, marg, FusionConfig(float(rng.choice([0.0, 0.04, 0.2]))))
        # replay the audit to check every intermediate set
        s = set(s0)
        count = unsatisfied(cliques, s)
        ok = True
        seen = set()
        for entry in result.audit:
            ok &= entry.clique not in seen
            seen.add(entry.clique)
            if entry.node is not None:
                ok &= entry.node in cliques[entry.clique].members
                s.add(entry.node)
            new = unsatisfied(cliques, s)
            ok &= new <= count and s0 <= s
            count = new
        ok &= s == set(result.leaks) and s0 <= result.leaks
        violations += not ok

    passed = table_ok and violations == 0 and ln2_err <= 1e-9
    detail = f"truth table {'exact' if table_ok else 'wrong'}, {violations} monotonicity violations in 10000, |H(0.5)-ln2|={ln2_err:.1e}"
    assert report_criterion("fusion correctness", passed, detail)


@pytest.fixture(scope="module")
def sweeps():
    """Full desk-scale sweep for each master seed, without the timing column."""
    out = {}
    for seed in range(N_MASTER_SEEDS):
        config = ExperimentConfig(master_seed=seed, record_runtime=False)
        t0 = time.perf_counter()
        records = run_experiment(config)
        out[seed] = (records, time.perf_counter() - t0)
    return out


def test_end_to_end_ordering(sweeps):
    cells = {}
    baselines = []
    for records, _ in sweeps.values():
        baselines.append(records[0].hamming_score_baseline)
        for r in records[1:]:
            cells.setdefault((r.p, r.gamma, r.Gamma), []).append(r.hamming_score_fused)
    base = float(np.mean(baselines))
    means = {k: float(np.mean(v)) for k, v in cells.items()}
    fused_ok = all(m >= base for m in means.values())
    order_ok = all(means[(0.7, g, G)] >= means[(0.3, g, G)] for (p, g, G) in means if p == 0.3)
    slowest = max(t for _, t in sweeps.values())
    complete = all(len(v) == N_MASTER_SEEDS for v in cells.values()) and len(cells) == 4
    passed = fused_ok and order_ok and slowest < 300 and complete
    summary = ", ".join(f"p={p} g={g} G={G}: {m:.4f}" for (p, g, G), m in sorted(means.items()))
    detail = f"{N_MASTER_SEEDS} seeds, baseline {base:.4f}; {summary}; slowest sweep {slowest:.1f}s"
    assert report_criterion("end-to-end ordering", passed, detail)


def test_determinism(sweeps, tmp_path):
    records, _ = sweeps[0]
    first = tmp_path / "first.csv"
    second = tmp_path / "second.csv"
    first.write_text(results_table(records))
    second.write_text(results_table(run_experiment(ExperimentConfig(master_seed=0, record_runtime=False))))
    same = first.read_bytes() == second.read_bytes()
    assert report_criterion("determinism", same, "byte-identical tables" if same else "tables differ")
