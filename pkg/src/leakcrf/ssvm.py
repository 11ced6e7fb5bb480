"""Structured SVM training of the CRF by stochastic subgradient descent.

Objective, with C multiplying the regularizer::

    J(w) = sum_n max_y [hamming(y, y_n) + w.theta(x_n, y) - w.theta(x_n, y_n)] + C/2 |w|^2
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .crf import CrfModel, _csr, _icm_kernel, _minimize, brier_score, expit, fit_platt, map_infer, node_margins
from .features import _joint, joint_dim
from .network import WaterNetwork

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingSample:
    node_feats: np.ndarray  # (n_nodes, d_f)
    labels: np.ndarray  # (n_nodes,) of 0/1


@dataclass(frozen=True)
class TrainingConfig:
    c_penalty: float = 0.25
    max_epochs: int = 50
    eta0: float = 0.1
    decay: float = 0.01
    seed: int = 0
    tolerance: float = 1e-4
    calibration_fraction: float = 0.2
    method: str = "icm"
    restarts: int = 20

    def __post_init__(self):
        if not self.c_penalty > 0:
            raise ValueError("c_penalty must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.calibration_fraction < 1:
            raise ValueError("calibration_fraction must be in [0, 1)")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "objective", "hinge", "w_norm", "eta"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def hamming_loss(y1, y2) -> int:
    y1 = np.asarray(y1)
    y2 = np.asarray(y2)
    if y1.shape != y2.shape:
        raise ValueError(f"labelings differ in length: {y1.shape} vs {y2.shape}")
    return int(np.count_nonzero(y1 != y2))


def _tables(w: np.ndarray, d_f: int, node_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    unary = -np.stack([node_feats @ w[:d_f], node_feats @ w[d_f : 2 * d_f]], axis=1)
    w00, w01, w10, w11 = w[2 * d_f :]
    off = 0.5 * (w01 + w10)
    return unary, -np.array([[w00, off], [off, w11]])


@njit(cache=True)
def _augmented_icm(w, d_f, node_feats, y, indptr, indices, edges, restarts, seed):
    n = node_feats.shape[0]
    unary = np.empty((n, 2))
    for v in range(n):
        s0 = 0.0
        s1 = 0.0
        for j in range(d_f):
            s0 += node_feats[v, j] * w[j]
            s1 += node_feats[v, j] * w[d_f + j]
        unary[v, 0] = -s0
        unary[v, 1] = -s1
        unary[v, 1 - y[v]] -= 1.0
    off = 0.5 * (w[2 * d_f + 1] + w[2 * d_f + 2])
    pair = np.empty((2, 2))
    pair[0, 0] = -w[2 * d_f]
    pair[0, 1] = -off
    pair[1, 0] = -off
    pair[1, 1] = -w[2 * d_f + 3]
    y_hat = _icm_kernel(unary, pair, indptr, indices, restarts, seed, 100)

    diff = np.zeros(2 * d_f + 4)
    loss = 0
    for v in range(n):
        if y_hat[v] != y[v]:
            loss += 1
            sign = 1.0 if y_hat[v] == 1 else -1.0
            for j in range(d_f):
                diff[j] -= sign * node_feats[v, j]
                diff[d_f + j] += sign * node_feats[v, j]
    for e in range(edges.shape[0]):
        a = edges[e, 0]
        b = edges[e, 1]
        for lab, sign in ((y_hat, 1.0), (y, -1.0)):
            if lab[a] == 1 and lab[b] == 1:
                diff[2 * d_f + 3] += sign
            elif lab[a] == 0 and lab[b] == 0:
                diff[2 * d_f] += sign
            else:
                diff[2 * d_f + 1] += 0.5 * sign
                diff[2 * d_f + 2] += 0.5 * sign
    value = float(loss)
    for j in range(2 * d_f + 4):
        value += w[j] * diff[j]
    return y_hat, diff, value


def _augmented_argmax(w, d_f, net, sample, method, restarts, seed):
    """Loss-augmented labeling, its joint-feature difference and hinge value."""
    y = sample.labels.astype(np.int8)
    if method == "icm":
        indptr, indices = _csr(net.n_nodes, net.edges)
        y_hat, diff, value = _augmented_icm(
            w, d_f, sample.node_feats, y.astype(np.int64), indptr, indices, net.edges, int(restarts), int(seed) % (2**32)
        )
        y_hat = y_hat.astype(np.int8)
    else:
        unary, pair = _tables(w, d_f, sample.node_feats)
        unary[np.arange(len(y)), 1 - y] -= 1.0
        y_hat = _minimize(unary, pair, net.edges, method, restarts, seed)
        diff = _joint(net.edges, sample.node_feats, y_hat) - _joint(net.edges, sample.node_feats, y)
        value = hamming_loss(y_hat, y) + float(w @ diff)
    if value <= 0.0:
        # the ground truth itself is a candidate, so the inner max is never below 0
        return y, np.zeros_like(diff), 0.0
    return y_hat, diff, value


def structured_hinge_loss(
    model: CrfModel,
    net: WaterNetwork,
    sample: TrainingSample,
    *,
    method: str = "icm",
    restarts: int = 20,
    seed: int = 0,
) -> float:
    """max_y [hamming(y, y_n) + w.theta(y) - w.theta(y_n)] for one sample."""
    return _augmented_argmax(model.w, model.d_f, net, sample, method, restarts, seed)[2]


def objective(
    w: np.ndarray,
    net: WaterNetwork,
    samples: Sequence[TrainingSample],
    c_penalty: float,
    *,
    method: str = "brute",
    restarts: int = 20,
    seed: int = 0,
) -> float:
    d_f = samples[0].node_feats.shape[1]
    hinge = sum(_augmented_argmax(w, d_f, net, s, method, restarts, seed)[2] for s in samples)
    return hinge + 0.5 * c_penalty * float(w @ w)


def subgradient(
    w: np.ndarray,
    net: WaterNetwork,
    samples: Sequence[TrainingSample],
    c_penalty: float,
    *,
    method: str = "brute",
    restarts: int = 20,
    seed: int = 0,
) -> np.ndarray:
    d_f = samples[0].node_feats.shape[1]
    g = c_penalty * np.asarray(w, dtype=float)
    for s in samples:
        g = g + _augmented_argmax(w, d_f, net, s, method, restarts, seed)[1]
    return g


def _check_dataset(samples: Sequence[TrainingSample], net: WaterNetwork) -> int:
    if not samples:
        raise ValueError("training set is empty")
    d_f = samples[0].node_feats.shape[1]
    for i, s in enumerate(samples):
        if s.node_feats.shape != (net.n_nodes, d_f):
            raise ValueError(f"sample {i}: node features have shape {s.node_feats.shape}, expected ({net.n_nodes}, {d_f})")
        if s.labels.shape != (net.n_nodes,):
            raise ValueError(f"sample {i}: labels have shape {s.labels.shape}, expected ({net.n_nodes},)")
    return d_f


def train(
    samples: Sequence[TrainingSample],
    net: WaterNetwork,
    config: TrainingConfig = TrainingConfig(),
    *,
    k: int = 2,
    layout_hash: str = "",
    log_rows: TrainingLog | None = None,
) -> CrfModel:
    """Fit ``w`` by stochastic subgradient descent, then Platt-calibrate on a held-out split.

    Step size at update ``t`` is ``eta0 / (1 + decay * t)``. Training stops
    after ``max_epochs`` or when the epoch objective changes by less than
    ``tolerance`` relative.
    """
    d_f = _check_dataset(samples, net)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    n_cal = int(round(config.calibration_fraction * len(samples)))
    if n_cal and len(samples) - n_cal < 1:
        raise ValueError("calibration split leaves no training samples")
    cal = [samples[i] for i in order[:n_cal]]
    fit = [samples[i] for i in order[n_cal:]]
    n_fit = len(fit)

    w = np.zeros(joint_dim(d_f))
    t = 0
    previous = None
    metrics = log_rows if log_rows is not None else TrainingLog()
    epochs_run = 0
    for epoch in range(config.max_epochs):
        eta = config.eta0
        for i in rng.permutation(n_fit):
            eta = config.eta0 / (1.0 + config.decay * t)
            _, diff, _ = _augmented_argmax(w, d_f, net, fit[i], config.method, config.restarts, config.seed + t)
            w = w - eta * (diff + (config.c_penalty / n_fit) * w)
            t += 1
        hinge = sum(
            _augmented_argmax(w, d_f, net, s, config.method, config.restarts, config.seed)[2] for s in fit
        )
        obj = hinge + 0.5 * config.c_penalty * float(w @ w)
        epochs_run = epoch + 1
        metrics.rows.append(
            {"epoch": epochs_run, "objective": obj, "hinge": hinge, "w_norm": float(np.linalg.norm(w)), "eta": eta}
        )
        log.debug("epoch %d objective %.6g hinge %.6g", epochs_run, obj, hinge)
        if not np.isfinite(obj):
            raise TrainingDivergedError(
                f"objective became {obj} at epoch {epochs_run} (eta={eta:.3g}, |w|={np.linalg.norm(w):.3g}); "
                "reduce eta0"
            )
        if previous is not None and abs(previous - obj) <= config.tolerance * max(1.0, abs(previous)):
            break
        previous = obj

    model = CrfModel(
        w,
        d_f=d_f,
        k=k,
        layout_hash=layout_hash,
        training={
            "config": asdict(config),
            "fingerprint": config.fingerprint(),
            "n_train": n_fit,
            "n_calibration": n_cal,
            "epochs": epochs_run,
            "final_objective": metrics.rows[-1]["objective"],
        },
    )
    if cal:
        margins, targets = calibration_margins(model, net, cal, method=config.method, restarts=config.restarts, seed=config.seed)
        model.calibration = fit_platt(margins, targets)
        model.training["calibration_brier"] = brier_score(expit(model.calibration[0] * margins + model.calibration[1]), targets)
    return model


def calibration_margins(model, net, samples, **infer_kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Node margins at the MAP labeling, with the true labels, pooled over ``samples``."""
    margins, targets = [], []
    for s in samples:
        y_map = map_infer(model, net, s.node_feats, **infer_kwargs)
        margins.append(node_margins(model, net, s.node_feats, y_map))
        targets.append(s.labels)
    return np.concatenate(margins), np.concatenate(targets).astype(float)
