"""Pairwise binary CRF over the pipe graph: energy, MAP solvers, marginals.

Sign convention: the model scores a labeling with ``w . theta(x, y)`` and its
energy is the negated score, so the highest-scoring labeling is the
minimum-energy one. Everything below works on energies.

Solvers operate on a node feature matrix (``n_nodes x d_f``) rather than raw
observations; :class:`leakcrf.features.FeatureMap` produces it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from numba import njit
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .features import _joint, joint_dim
from .network import WaterNetwork

MODEL_FORMAT_VERSION = 1
BRUTE_FORCE_LIMIT = 20
DEFAULT_RESTARTS = 20


class MissingCalibrationError(RuntimeError):
    """Model was trained without a calibration pass."""


class GraphTooLargeError(ValueError):
    pass


@dataclass
class CrfModel:
    """Weight vector plus the feature configuration it was trained against.

    ``w`` is laid out as [label-0 node weights | label-1 node weights |
    w00, w01, w10, w11].
    """

    w: np.ndarray
    d_f: int = 5
    k: int = 2
    layout_hash: str = ""
    calibration: tuple[float, float] | None = None
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (joint_dim(self.d_f),):
            raise ValueError(f"w must have length {joint_dim(self.d_f)} for d_f={self.d_f}, got {self.w.shape}")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("model weights must be finite")

    @classmethod
    def zeros(cls, d_f: int = 5, **kwargs) -> CrfModel:
        return cls(np.zeros(joint_dim(d_f)), d_f=d_f, **kwargs)

    def unary_energy(self, node_feats: np.ndarray) -> np.ndarray:
        """(n, 2) energies of labeling each node 0 or 1."""
        node_feats = np.asarray(node_feats, dtype=float)
        if node_feats.ndim != 2 or node_feats.shape[1] != self.d_f:
            raise ValueError(f"node features must have shape (n, {self.d_f})")
        d = self.d_f
        return -np.stack([node_feats @ self.w[:d], node_feats @ self.w[d : 2 * d]], axis=1)

    def pair_energy(self) -> np.ndarray:
        """Symmetric 2x2 edge energy table."""
        w00, w01, w10, w11 = self.w[2 * self.d_f :]
        off = 0.5 * (w01 + w10)
        return -np.array([[w00, off], [off, w11]])

    def is_submodular(self) -> bool:
        p = self.pair_energy()
        return p[0, 0] + p[1, 1] <= p[0, 1] + p[1, 0]

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "w": [float(x) for x in self.w],
            "calibration": None if self.calibration is None else {"a": self.calibration[0], "b": self.calibration[1]},
            "feature_config": {"k": self.k, "d_f": self.d_f, "layout_hash": self.layout_hash},
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CrfModel:
        if data.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {data.get('format_version')!r}")
        cal = data.get("calibration")
        fc = data["feature_config"]
        return cls(
            np.array(data["w"], dtype=float),
            d_f=int(fc["d_f"]),
            k=int(fc["k"]),
            layout_hash=fc.get("layout_hash", ""),
            calibration=None if cal is None else (float(cal["a"]), float(cal["b"])),
            training=data.get("training", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> CrfModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- energies ---------------------------------------------------------------


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labeling must have one label per node ({n})")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int8)


def table_energy(unary: np.ndarray, pair: np.ndarray, edges: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.int64)
    e = unary[np.arange(len(y)), y].sum()
    if len(edges):
        e += pair[y[edges[:, 0]], y[edges[:, 1]]].sum()
    return float(e)


def energy(model: CrfModel, net: WaterNetwork, node_feats: np.ndarray, y) -> float:
    """Energy ``-w . theta(x, y)`` of labeling ``y``."""
    y = _check_labels(y, net.n_nodes)
    node_feats = np.asarray(node_feats, dtype=float)
    if node_feats.shape != (net.n_nodes, model.d_f):
        raise ValueError(f"node features must have shape ({net.n_nodes}, {model.d_f})")
    return -float(model.w @ _joint(net.edges, node_feats, y))


def _all_labelings(n: int) -> np.ndarray:
    # row i is the binary expansion of i with node 0 as most significant bit,
    # so row order is lexicographic order
    codes = np.arange(2**n, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    return ((codes[:, None] >> shifts) & 1).astype(np.int8)


def brute_force_minimize(unary: np.ndarray, pair: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Exact minimizer by enumeration; ties go to the lexicographically smallest labeling."""
    n = len(unary)
    if n > BRUTE_FORCE_LIMIT:
        raise GraphTooLargeError(f"brute force is limited to {BRUTE_FORCE_LIMIT} nodes, got {n}")
    ys = _all_labelings(n).astype(np.int64)
    e = unary[np.arange(n), ys].sum(axis=1)
    if len(edges):
        e = e + pair[ys[:, edges[:, 0]], ys[:, edges[:, 1]]].sum(axis=1)
    return ys[int(np.argmin(e))].astype(np.int8)


def brute_force_infer(model: CrfModel, net: WaterNetwork, node_feats: np.ndarray) -> np.ndarray:
    return brute_force_minimize(model.unary_energy(node_feats), model.pair_energy(), net.edges)


# -- ICM --------------------------------------------------------------------


@njit(cache=True)
def _icm_kernel(unary, pair, indptr, indices, restarts, seed, max_sweeps):
    n = unary.shape[0]
    np.random.seed(seed)
    best = np.zeros(n, dtype=np.int64)
    best_energy = np.inf
    y = np.zeros(n, dtype=np.int64)
    for r in range(restarts + 1):
        for v in range(n):
            y[v] = 0 if r == 0 else np.random.randint(0, 2)
        for _ in range(max_sweeps):
            changed = False
            for v in range(n):
                e0 = unary[v, 0]
                e1 = unary[v, 1]
                for j in range(indptr[v], indptr[v + 1]):
                    u = indices[j]
                    e0 += pair[0, y[u]]
                    e1 += pair[1, y[u]]
                if y[v] == 0 and e1 < e0:
                    y[v] = 1
                    changed = True
                elif y[v] == 1 and e0 < e1:
                    y[v] = 0
                    changed = True
            if not changed:
                break
        total = 0.0
        for v in range(n):
            total += unary[v, y[v]]
            for j in range(indptr[v], indptr[v + 1]):
                u = indices[j]
                if u > v:
                    total += pair[y[v], y[u]]
        take = total < best_energy
        if total == best_energy:
            # lexicographic tie-break
            for v in range(n):
                if y[v] != best[v]:
                    take = y[v] < best[v]
                    break
        if take:
            best_energy = total
            best[:] = y
    return best


_CSR_CACHE: dict = {}


def _csr(n: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    key = (n, edges.tobytes())
    hit = _CSR_CACHE.get(key)
    if hit is not None:
        return hit
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.zeros(n + 1, dtype=np.int64)
    np.add.at(counts, src + 1, 1)
    out = (np.cumsum(counts), dst.astype(np.int64))
    if len(_CSR_CACHE) > 256:
        _CSR_CACHE.clear()
    _CSR_CACHE[key] = out
    return out


def icm_minimize(
    unary: np.ndarray,
    pair: np.ndarray,
    edges: np.ndarray,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    max_sweeps: int = 100,
) -> np.ndarray:
    """Iterated conditional modes from the all-zeros start plus ``restarts`` random starts.

    Returns the lowest-energy local optimum; equal energies resolve to the
    lexicographically smallest labeling.
    """
    indptr, indices = _csr(len(unary), edges)
    best = _icm_kernel(
        np.ascontiguousarray(unary, dtype=float),
        np.ascontiguousarray(pair, dtype=float),
        indptr,
        indices,
        int(restarts),
        int(seed) % (2**32),
        int(max_sweeps),
    )
    return best.astype(np.int8)


# -- min-cut ----------------------------------------------------------------


def mincut_minimize(unary: np.ndarray, pair: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Exact minimizer for a submodular pair table via s-t minimum cut.

    Source side of the cut is label 0, sink side label 1.
    """
    a, b, c, d = pair[0, 0], pair[0, 1], pair[1, 0], pair[1, 1]
    lam = b + c - a - d
    if lam < 0:
        raise ValueError("pair table is not submodular; min-cut is not exact")
    n = len(unary)
    coef = unary[:, 1] - unary[:, 0]
    coef = coef.astype(float).copy()
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_nodes_from(("s", "t"))
    for u, v in edges:
        # E(yu, yv) = a + (c - a) yu + (d - c) yv + lam (1 - yu) yv
        coef[u] += c - a
        coef[v] += d - c
        if lam > 0:
            cap = g[u][v]["capacity"] + lam if g.has_edge(u, v) else lam
            g.add_edge(int(u), int(v), capacity=cap)
    for v in range(n):
        if coef[v] > 0:
            g.add_edge("s", v, capacity=float(coef[v]))
        elif coef[v] < 0:
            g.add_edge(v, "t", capacity=float(-coef[v]))
    _, (source_side, _) = nx.minimum_cut(g, "s", "t")
    y = np.ones(n, dtype=np.int8)
    for v in source_side:
        if v != "s":
            y[v] = 0
    return y


# -- inference entry points -------------------------------------------------


def _minimize(unary, pair, edges, method, restarts, seed):
    if method == "icm":
        return icm_minimize(unary, pair, edges, restarts=restarts, seed=seed)
    if method == "mincut":
        return mincut_minimize(unary, pair, edges)
    if method == "auto":
        if pair[0, 0] + pair[1, 1] <= pair[0, 1] + pair[1, 0]:
            return mincut_minimize(unary, pair, edges)
        return icm_minimize(unary, pair, edges, restarts=restarts, seed=seed)
    if method == "brute":
        return brute_force_minimize(unary, pair, edges)
    raise ValueError(f"unknown inference method {method!r}")


def map_infer(
    model: CrfModel,
    net: WaterNetwork,
    node_feats: np.ndarray,
    *,
    method: str = "icm",
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
) -> np.ndarray:
    """Highest-scoring labeling.

    ``method`` is ``"icm"`` (default), ``"mincut"`` (exact, submodular models
    only), ``"auto"`` (min-cut when submodular, else ICM) or ``"brute"``.
    """
    return _minimize(model.unary_energy(node_feats), model.pair_energy(), net.edges, method, restarts, seed)


def loss_augmented_infer(
    model: CrfModel,
    net: WaterNetwork,
    node_feats: np.ndarray,
    y_true,
    *,
    method: str = "icm",
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
) -> np.ndarray:
    """argmax over y of hamming(y, y_true) + w . theta(x, y)."""
    y_true = _check_labels(y_true, net.n_nodes)
    unary = model.unary_energy(node_feats).copy()
    # one unit of loss for disagreeing with y_true, folded into the unary energy
    unary[np.arange(net.n_nodes), 1 - y_true] -= 1.0
    return _minimize(unary, model.pair_energy(), net.edges, method, restarts, seed)


# -- marginals --------------------------------------------------------------


def node_margins(model: CrfModel, net: WaterNetwork, node_feats: np.ndarray, labels) -> np.ndarray:
    """Score gain of label 1 over label 0 at each node, neighbours held at ``labels``."""
    labels = _check_labels(labels, net.n_nodes).astype(np.int64)
    unary = model.unary_energy(node_feats)
    pair = model.pair_energy()
    margin = unary[:, 0] - unary[:, 1]
    edges = net.edges
    if len(edges):
        for a, b in ((0, 1), (1, 0)):
            u, v = edges[:, a], edges[:, b]
            np.add.at(margin, u, pair[0, labels[v]] - pair[1, labels[v]])
    return margin


def node_marginals(
    model: CrfModel,
    net: WaterNetwork,
    node_feats: np.ndarray,
    labels=None,
    **infer_kwargs,
) -> np.ndarray:
    """Calibrated per-node probability of label 1.

    ``p1 = sigmoid(a * m + b)`` with ``m`` from :func:`node_margins` at the
    MAP labeling (computed when ``labels`` is not given).
    """
    if model.calibration is None:
        raise MissingCalibrationError("model has no calibration; train with a calibration split")
    if labels is None:
        labels = map_infer(model, net, node_feats, **infer_kwargs)
    a, b = model.calibration
    return expit(a * node_margins(model, net, node_feats, labels) + b)


def fit_platt(margins: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Platt scaling: fit ``p = sigmoid(a m + b)`` by regularized-target maximum likelihood."""
    m = np.asarray(margins, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    n_pos = float(t.sum())
    n_neg = float(len(t) - n_pos)
    soft = np.where(t > 0.5, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    # standardize for conditioning, map back afterwards
    scale = float(np.std(m)) or 1.0
    z = m / scale

    def nll(params):
        a, b = params
        s = a * z + b
        return -np.sum(soft * log_expit(s) + (1.0 - soft) * log_expit(-s))

    def grad(params):
        a, b = params
        diff = expit(a * z + b) - soft
        return np.array([np.sum(diff * z), np.sum(diff)])

    prior = math.log((n_pos + 1.0) / (n_neg + 1.0))
    res = minimize(nll, np.array([1.0, prior]), jac=grad, method="BFGS")
    a, b = res.x
    return float(a / scale), float(b)


def brier_score(probs: np.ndarray, targets: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    return float(np.mean((probs - targets) ** 2))
