"""Command-line entry point: ``leakcrf {generate,train,infer,fuse,evaluate,sweep}``.

A dataset directory written by ``generate`` holds::

    network.json  patterns.json  baseline/  scenario_0000/ ... scenario_NNNN/

where ``baseline/`` is the leak-free day and each scenario directory has
observations.csv, labels.csv, scenario.json and reports.csv.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .crf import CrfModel, map_infer, node_marginals
from .features import FeatureMap, layout_hash
from .fusion import (
    FusionConfig,
    ReportSimConfig,
    build_cliques,
    greedy_fuse,
    load_reports,
    save_fusion,
    save_reports,
    simulate_reports,
)
from .harness import hamming_score, load_config, run_experiment, write_results
from .hydrosim import (
    STEPS_PER_DAY,
    Scenario,
    ScenarioConfig,
    default_patterns,
    generate_scenario,
    load_observations,
    save_patterns,
    save_simulation,
    simulate,
)
from .network import SensorLayout, generate_benchmark_network, load_network, save_network
from .ssvm import TrainingConfig, TrainingLog, TrainingSample, train

log = logging.getLogger("leakcrf")


class CliError(Exception):
    pass


def _layout(net, kind: str) -> SensorLayout:
    if kind == "full":
        return SensorLayout.full(net)
    return SensorLayout(tuple(n.id for n in net.nodes))


def cmd_generate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = generate_benchmark_network(args.nodes, args.seed)
    patterns = default_patterns(seed=args.seed)
    layout = _layout(net, args.layout)
    save_network(net, out / "network.json")
    save_patterns(patterns, out / "patterns.json")
    save_simulation(simulate(net, Scenario(seed=args.seed), patterns, layout), out / "baseline")
    config = ScenarioConfig(max_leaks=args.max_leaks)
    report_config = ReportSimConfig(p_report=args.p_report, location_noise_sigma=args.report_sigma)
    for i in range(args.scenarios):
        scenario = generate_scenario(net, config, seed=args.seed * 100_003 + i)
        result = simulate(net, scenario, patterns, layout, noise_sigma=args.noise)
        target = out / f"scenario_{i:04d}"
        save_simulation(result, target)
        save_reports(simulate_reports(scenario, net, report_config, seed=scenario.seed), target / "reports.csv")
    print(f"wrote network ({net.n_nodes} nodes, {net.n_pipes} pipes) and {args.scenarios} scenarios to {out}")


def _load_dataset(data: Path):
    if not (data / "network.json").exists():
        raise CliError(f"{data}: missing network.json (run 'generate' first)")
    net = load_network(data / "network.json")
    layout, base_obs, _, _ = load_observations(data / "baseline")
    return net, layout, base_obs


def _scenario_dirs(data: Path) -> list[Path]:
    return sorted(p for p in data.iterdir() if p.is_dir() and p.name.startswith("scenario_"))


def cmd_train(args) -> None:
    data = Path(args.data)
    net, layout, base_obs = _load_dataset(data)
    fmap = FeatureMap(net, layout, args.hops)
    samples = []
    for d in _scenario_dirs(data):
        _, obs, labels, _ = load_observations(d)
        samples.append(TrainingSample(fmap.matrix(obs[args.step], base_obs[args.step]), labels[args.step]))
    if not samples:
        raise CliError(f"{data}: no scenario directories to train on")
    config = TrainingConfig(
        c_penalty=args.c, max_epochs=args.epochs, eta0=args.eta0, seed=args.seed,
        calibration_fraction=args.calibration_fraction,
    )
    metrics = TrainingLog()
    model = train(samples, net, config, k=args.hops, layout_hash=layout_hash(layout), log_rows=metrics)
    model.save(args.out)
    if args.metrics:
        metrics.write(args.metrics)
    print(f"trained on {len(samples)} samples in {model.training['epochs']} epochs; model written to {args.out}")


def cmd_infer(args) -> None:
    data = Path(args.data)
    net, layout, base_obs = _load_dataset(data)
    model = CrfModel.load(args.model)
    if model.layout_hash and model.layout_hash != layout_hash(layout):
        raise CliError("model was trained on a different sensor layout")
    fmap = FeatureMap(net, layout, model.k)
    _, obs, _, _ = load_observations(data / args.scenario)
    feats = fmap.matrix(obs[args.step], base_obs[args.step])
    y = map_infer(model, net, feats, seed=args.seed)
    probs = node_marginals(model, net, feats, labels=y) if model.calibration is not None else np.full(net.n_nodes, np.nan)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "label", "p1"])
        for v in range(net.n_nodes):
            writer.writerow([v, int(y[v]), repr(float(probs[v]))])
    print(f"predicted leaks: {sorted(int(v) for v in np.flatnonzero(y))}")


def read_leak_set(path: str | Path, step: int | None = None) -> set[int]:
    """Leak nodes from a node,label[,p1] file or from a simulation labels.csv matrix."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{path}: empty label file")
    header = rows[0]
    if header[:2] == ["node", "label"]:
        return {int(r[0]) for r in rows[1:] if int(r[1]) == 1}
    if header and header[0] == "step":
        body = rows[1:]
        row = body[step if step is not None else len(body) - 1]
        return {int(name[1:]) for name, val in zip(header[1:], row[1:]) if int(val) == 1}
    raise CliError(f"{path}: unrecognised label file header {header[:3]}")


def cmd_fuse(args) -> None:
    net = load_network(args.network)
    with open(args.pred, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "p1" not in rows[0]:
        raise CliError(f"{args.pred}: expected columns node,label,p1 as written by 'infer'")
    leak_set = {int(r["node"]) for r in rows if int(r["label"]) == 1}
    probs = {int(r["node"]): float(r["p1"]) for r in rows}
    if any(np.isnan(p) for p in probs.values()):
        raise CliError("predictions carry no probabilities; the model was trained without calibration")
    reports = [r for r in load_reports(args.reports) if r.step <= args.step]
    cliques = build_cliques(reports, net, args.gamma)
    result = greedy_fuse(leak_set, cliques, probs, FusionConfig(args.gate))
    audit = args.audit or str(Path(args.out).with_suffix(".audit.csv"))
    save_fusion(result, net.n_nodes, args.out, audit)
    print(f"fused leaks: {sorted(result.leaks)} (unresolved reports: {result.unresolved}, dropped: {cliques.dropped})")


def cmd_evaluate(args) -> None:
    score = hamming_score(read_leak_set(args.pred), read_leak_set(args.truth, args.step))
    print(f"{score:.6f}")


def cmd_sweep(args) -> None:
    config = load_config(args.config) if args.config else None
    if config is None:
        from .harness import ExperimentConfig

        config = ExperimentConfig()
    if args.seed is not None:
        config.master_seed = args.seed
    if args.no_timing:
        config.record_runtime = False
    records = run_experiment(config)
    write_results(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leakcrf", description="Leak localization with a CRF and human-report fusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a benchmark network and simulated scenarios")
    p.add_argument("--nodes", type=int, default=96)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--scenarios", type=int, default=10)
    p.add_argument("--max-leaks", type=int, default=3)
    p.add_argument("--layout", choices=("pressure", "full"), default="pressure")
    p.add_argument("--noise", type=float, default=0.0, help="sensor noise sigma")
    p.add_argument("--p-report", type=float, default=0.7)
    p.add_argument("--report-sigma", type=float, default=0.5)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a CRF model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--hops", type=int, default=1)
    p.add_argument("--step", type=int, default=STEPS_PER_DAY - 1)
    p.add_argument("--c", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--eta0", type=float, default=0.1)
    p.add_argument("--calibration-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="phase I prediction for one scenario")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True, help="scenario directory name, e.g. scenario_0003")
    p.add_argument("--step", type=int, default=STEPS_PER_DAY - 1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="phase II fusion of human reports")
    p.add_argument("--network", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--gate", type=float, default=0.0, help="entropy gate in nats")
    p.add_argument("--step", type=int, default=STEPS_PER_DAY - 1)
    p.add_argument("--out", required=True)
    p.add_argument("--audit")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="Hamming score of a prediction against the truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--step", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the full experiment grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-timing", action="store_true", help="write runtime_s as 0 for byte-reproducible tables")
    p.set_defaults(func=cmd_sweep)
    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"leakcrf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())
