"""Observation vectors, per-node residual features and the joint feature map.

The joint feature of a labeling ``y`` is laid out as::

    [ sum of node features with y_v = 0 | sum with y_v = 1 | n00, n01, n10, n11 ]

where the last four entries count open-pipe edges by endpoint labels. Edges
are undirected, so a discordant edge adds 0.5 to both ``n01`` and ``n10``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .hydrosim import SimulationResult, observe
from .network import SensorLayout, WaterNetwork

N_NODE_FEATURES = 5
N_PAIR_FEATURES = 4
DEFAULT_HOPS = 2
FEATURE_NAMES = ("resid_mean", "resid_min", "resid_max", "own_pressure_resid", "bias")


def joint_dim(d_f: int = N_NODE_FEATURES) -> int:
    return 2 * d_f + N_PAIR_FEATURES


def layout_hash(layout: SensorLayout) -> str:
    return hashlib.sha256(layout.key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ObservationVector:
    values: np.ndarray
    step: int
    layout_key: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")


def extract_observations(result: SimulationResult, layout: SensorLayout, step: int, net: WaterNetwork | None = None) -> ObservationVector:
    """Observation row for ``step``: pressures at pressure sensors, then flows at flow sensors.

    The recorded (possibly noisy) row is returned when ``layout`` is the one
    the simulation recorded; a different layout is read off the noise-free
    states, which needs ``net`` and a noise-free result.
    """
    if not 0 <= step < len(result.states):
        raise IndexError(f"step {step} out of range [0, {len(result.states)})")
    if layout == result.layout:
        values = result.observations[step].copy()
    else:
        if result.noise_sigma > 0:
            raise ValueError("layout differs from the recorded layout of a noisy simulation")
        if net is None:
            raise ValueError("net is required to observe an unrecorded layout")
        values = observe(net, result.states[step], layout)
    return ObservationVector(values, step, layout.key)


class FeatureMap:
    """Precomputed k-hop sensor neighbourhoods for one (network, layout, k).

    A flow sensor belongs to the neighbourhood of ``v`` when both pipe
    endpoints lie within ``k`` hops. Flow residuals are taken on flow
    magnitude since the sign only reflects stored endpoint order.
    """

    def __init__(self, net: WaterNetwork, layout: SensorLayout, k: int = DEFAULT_HOPS):
        if k < 0:
            raise ValueError("hop radius k must be >= 0")
        layout.validate(net)
        self.net = net
        self.layout = layout
        self.k = k
        self.layout_key = layout.key
        n_p = len(layout.pressure_sensors)
        self.is_flow = np.zeros(layout.dim, dtype=bool)
        self.is_flow[n_p:] = True
        p_pos = {v: i for i, v in enumerate(layout.pressure_sensors)}
        members: list[list[int]] = []
        own = np.full(net.n_nodes, -1, dtype=np.int64)
        for v in range(net.n_nodes):
            within = {u for u, d in net.hop_distances(v).items() if d <= k}
            idx = [p_pos[u] for u in sorted(within) if u in p_pos]
            for j, e in enumerate(layout.flow_sensors):
                a, b = net.pipes[e].endpoints
                if a in within and b in within:
                    idx.append(n_p + j)
            members.append(idx)
            own[v] = p_pos.get(v, -1)
        width = max((len(m) for m in members), default=0)
        self.index = np.zeros((net.n_nodes, max(width, 1)), dtype=np.int64)
        self.mask = np.zeros((net.n_nodes, max(width, 1)), dtype=bool)
        for v, idx in enumerate(members):
            self.index[v, : len(idx)] = idx
            self.mask[v, : len(idx)] = True
        self.count = self.mask.sum(axis=1)
        self.own = own

    def residual(self, x: np.ndarray, baseline: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        baseline = np.asarray(baseline, dtype=float)
        if x.shape != (self.layout.dim,) or baseline.shape != x.shape:
            raise ValueError(f"observation length must be {self.layout.dim}")
        return np.where(self.is_flow, np.abs(x) - np.abs(baseline), x - baseline)

    def matrix(self, x, baseline) -> np.ndarray:
        """Node feature matrix of shape (n_nodes, 5)."""
        if isinstance(x, ObservationVector):
            _check_layout(x, self.layout_key)
            x = x.values
        if isinstance(baseline, ObservationVector):
            _check_layout(baseline, self.layout_key)
            baseline = baseline.values
        r = self.residual(x, baseline)
        vals = r[self.index]
        has = self.count > 0
        total = np.where(self.mask, vals, 0.0).sum(axis=1)
        out = np.zeros((self.net.n_nodes, N_NODE_FEATURES))
        out[:, 0] = np.where(has, total / np.maximum(self.count, 1), 0.0)
        out[:, 1] = np.where(has, np.where(self.mask, vals, np.inf).min(axis=1), 0.0)
        out[:, 2] = np.where(has, np.where(self.mask, vals, -np.inf).max(axis=1), 0.0)
        out[:, 3] = np.where(self.own >= 0, r[np.maximum(self.own, 0)], 0.0)
        out[:, 4] = 1.0
        return out


def _check_layout(obs: ObservationVector, key: str) -> None:
    if obs.layout_key != key:
        raise ValueError("observation layout does not match the feature map layout")


@lru_cache(maxsize=32)
def feature_map(net: WaterNetwork, layout: SensorLayout, k: int = DEFAULT_HOPS) -> FeatureMap:
    return FeatureMap(net, layout, k)


def _layout_from_key(key: str) -> SensorLayout:
    names = key.split(",") if key else []
    return SensorLayout(
        tuple(int(s[1:]) for s in names if s.startswith("p")),
        tuple(int(s[1:]) for s in names if s.startswith("q")),
    )


def node_features(x: ObservationVector, baseline: ObservationVector, net: WaterNetwork, v: int, k: int = DEFAULT_HOPS) -> np.ndarray:
    """Five residual features of node ``v``: k-hop mean/min/max, own pressure residual, bias."""
    if x.layout_key != baseline.layout_key:
        raise ValueError("x and baseline were recorded with different layouts")
    if not 0 <= v < net.n_nodes:
        raise IndexError(f"invalid node id {v}")
    fmap = feature_map(net, _layout_from_key(x.layout_key), k)
    return fmap.matrix(x, baseline)[v]


def joint_feature_from_matrix(net: WaterNetwork, node_feats: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (net.n_nodes,):
        raise ValueError(f"labeling must have one label per node ({net.n_nodes})")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return _joint(net.edges, node_feats, y)


def _joint(edges: np.ndarray, node_feats: np.ndarray, y: np.ndarray) -> np.ndarray:
    on = y.astype(float)
    unary1 = node_feats.T @ on
    unary0 = node_feats.sum(axis=0) - unary1
    ya = y[edges[:, 0]]
    yb = y[edges[:, 1]]
    n11 = float(np.sum(ya & yb))
    n_disc = float(np.sum(ya != yb))
    n00 = len(edges) - n11 - n_disc
    return np.concatenate([unary0, unary1, [n00, 0.5 * n_disc, 0.5 * n_disc, n11]])


def joint_feature(net: WaterNetwork, x: ObservationVector, y, baseline: ObservationVector, k: int = DEFAULT_HOPS) -> np.ndarray:
    if x.layout_key != baseline.layout_key:
        raise ValueError("x and baseline were recorded with different layouts")
    fmap = feature_map(net, _layout_from_key(x.layout_key), k)
    return joint_feature_from_matrix(net, fmap.matrix(x, baseline), y)


# -- persistence ------------------------------------------------------------


def save_feature_dataset(
    directory: str | Path,
    node_feats: np.ndarray,
    labels: np.ndarray,
    k: int,
    layout: SensorLayout,
) -> None:
    """Write features.csv (one row per sample and node) plus manifest.json."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n_samples, n_nodes, d_f = node_feats.shape
    with open(out / "features.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "node", *FEATURE_NAMES[:d_f], "label"])
        for s in range(n_samples):
            for v in range(n_nodes):
                writer.writerow([s, v, *(repr(float(f)) for f in node_feats[s, v]), int(labels[s, v])])
    manifest = {
        "format_version": 1,
        "d_f": d_f,
        "k": k,
        "layout_hash": layout_hash(layout),
        "n_samples": n_samples,
        "n_nodes": n_nodes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_feature_dataset(directory: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    raw = np.loadtxt(src / "features.csv", delimiter=",", skiprows=1, ndmin=2)
    n_s, n_v, d_f = manifest["n_samples"], manifest["n_nodes"], manifest["d_f"]
    feats = raw[:, 2 : 2 + d_f].reshape(n_s, n_v, d_f)
    labels = raw[:, 2 + d_f].astype(np.int8).reshape(n_s, n_v)
    return feats, labels, manifest
