"""Trip graphs and a two-layer graph-attention fare regressor.

Each trip is a node. Edges link a trip to its k nearest trips (by pickup
distance, or by fare difference in the ``fare_similarity`` mode) among trips
whose pickup time lies within ``time_window`` seconds; the edge set is then
symmetrised and every node gets a self-loop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import ColumnTable
from .errors import ContractError, EmptyDatasetError, EnsembleError
from .nn import AdamWConfig, Dense, Module, TrainConfig, TrainResult, glorot_uniform, train
from .preprocess import haversine_km_array

EDGE_MODES = ("temporal_spatial", "fare_similarity")
LEAKY_SLOPE = 0.2


@dataclass
class TripGraph:
    """CSR adjacency: neighbours of node i are ``indices[indptr[i]:indptr[i+1]]``,
    ascending, self-loop included."""

    node_features: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    edge_rule: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_list(self) -> list[tuple[int, int]]:
        return [(int(s), int(d)) for d in range(self.n_nodes) for s in self.neighbors(d)]

    def with_features(self, features: np.ndarray) -> "TripGraph":
        if len(features) != self.n_nodes:
            raise ContractError(f"{len(features)} feature rows for {self.n_nodes} nodes")
        return TripGraph(np.asarray(features, dtype=np.float64), self.indptr, self.indices, self.edge_rule)

    def write_csv(self, edge_path: str | Path, feature_path: str | Path | None = None, feature_names: Sequence[str] | None = None) -> None:
        with Path(edge_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst"])
            for dst in range(self.n_nodes):
                for src in self.neighbors(dst):
                    w.writerow([int(src), dst])
        if feature_path is not None:
            names = list(feature_names or [f"f{j}" for j in range(self.node_features.shape[1])])
            with Path(feature_path).open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["node"] + names)
                for i, row in enumerate(self.node_features):
                    w.writerow([i] + [repr(float(v)) for v in row])


def _csr_from_pairs(n: int, dst: np.ndarray, src: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    codes = np.unique(dst.astype(np.int64) * n + src.astype(np.int64))
    d, s = codes // n, codes % n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, d + 1, 1)
    return np.cumsum(indptr), s.astype(np.int64)


def build_graph(
    table: ColumnTable,
    mode: str = "temporal_spatial",
    k: int = 8,
    time_window: float = 900.0,
    feature_columns: Sequence[str] | None = None,
    features: np.ndarray | None = None,
) -> TripGraph:
    """Construct the trip graph from raw-unit columns of ``table``.

    Node features come from ``features`` if given, else from
    ``feature_columns`` of ``table``. When fewer than k trips are eligible a
    node links to all of them.
    """
    if mode not in EDGE_MODES:
        raise ContractError(f"unknown edge mode {mode!r}; choose from {EDGE_MODES}")
    if k < 1:
        raise ContractError("k must be >= 1")
    n = table.n_rows
    if n == 0:
        raise EmptyDatasetError("cannot build a graph over zero trips")

    t = table.column("pickup_datetime")
    order = np.argsort(t, kind="stable")
    ts = t[order]
    lo = np.searchsorted(ts, ts - time_window, side="left")
    hi = np.searchsorted(ts, ts + time_window, side="right")
    if mode == "temporal_spatial":
        lat, lon = table.column("pickup_latitude"), table.column("pickup_longitude")
    else:
        fare = table.column("fare_amount")

    dst_list, src_list = [], []
    for pos in range(n):
        i = order[pos]
        cand = order[lo[pos] : hi[pos]]
        cand = cand[cand != i]
        if len(cand) == 0:
            continue
        if mode == "temporal_spatial":
            dist = haversine_km_array(np.full(len(cand), lat[i]), np.full(len(cand), lon[i]), lat[cand], lon[cand])
        else:
            dist = np.abs(fare[cand] - fare[i])
        pick = cand[np.lexsort((cand, dist))[:k]]
        dst_list.append(np.full(len(pick), i))
        src_list.append(pick)

    dst = np.concatenate(dst_list + [np.arange(n)]) if dst_list else np.arange(n)
    src = np.concatenate(src_list + [np.arange(n)]) if src_list else np.arange(n)
    # symmetric closure
    dst, src = np.concatenate([dst, src]), np.concatenate([src, dst])
    indptr, indices = _csr_from_pairs(n, dst, src)

    if features is None:
        features = table.matrix(feature_columns) if feature_columns else np.zeros((n, 0))
    rule = {"mode": mode, "k": k, "time_window": time_window}
    return TripGraph(np.asarray(features, dtype=np.float64), indptr, indices, rule)


# -- sampled computation blocks ------------------------------------------------


@dataclass
class Hop:
    """Edges feeding one attention layer, in local indices.

    ``dst`` indexes the layer's output rows, ``src`` its input rows, and
    ``self_idx[i]`` is the input row of output node i.
    """

    dst: np.ndarray
    src: np.ndarray
    self_idx: np.ndarray
    n_out: int


@dataclass
class GraphBatch:
    input_nodes: np.ndarray  # global ids, ascending
    features: np.ndarray
    hops: list[Hop]
    output_nodes: np.ndarray  # global ids in request order


def _row_edges(graph: TripGraph, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(segment, edge id) for every CSR entry of ``nodes``, rows in request order."""
    starts = graph.indptr[nodes]
    deg = graph.indptr[nodes + 1] - starts
    seg = np.repeat(np.arange(len(nodes)), deg)
    offsets = np.cumsum(deg) - deg
    eid = np.arange(int(deg.sum())) - np.repeat(offsets, deg) + np.repeat(starts, deg)
    return seg, eid


def _sampled_edges(graph: TripGraph, nodes: np.ndarray, fanout: int | None, keys: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Kept (segment, source) pairs: per row the ``fanout`` lowest-keyed edges,
    in ascending source order."""
    seg, eid = _row_edges(graph, nodes)
    if keys is not None:
        order = np.lexsort((keys[eid], seg))
        first = np.searchsorted(seg[order], seg[order], side="left")
        rank = np.empty(len(eid), dtype=np.int64)
        rank[order] = np.arange(len(eid)) - first
        keep = rank < fanout
        seg, eid = seg[keep], eid[keep]
    return seg, graph.indices[eid]


def sample_block(graph: TripGraph, nodes: Sequence[int], n_layers: int = 2, fanout: int | None = 8, rng: np.random.Generator | None = None) -> GraphBatch:
    """Materialise the ``n_layers``-hop neighbourhood of ``nodes``.

    One random key per edge is drawn per call and each node keeps its
    ``fanout`` lowest-keyed neighbours, so a node reached at several hops sees
    the same neighbours everywhere. With ``fanout=None`` or a fan-out at least
    the max degree no randomness is drawn and full lists are used.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    keys = None
    if fanout is not None and fanout < int(graph.degrees().max()):
        rng = rng or np.random.default_rng(0)
        keys = rng.random(graph.n_edges)

    sets = [nodes]
    for _ in range(n_layers):
        frontier = np.unique(sets[-1])
        _, src = _sampled_edges(graph, frontier, fanout, keys)
        sets.append(np.union1d(frontier, src))

    hops: list[Hop] = []
    for layer in range(n_layers, 0, -1):
        inputs, outputs = sets[layer], sets[layer - 1]
        seg, src = _sampled_edges(graph, outputs, fanout, keys)
        hops.append(
            Hop(
                dst=seg.astype(np.intp),
                src=np.searchsorted(inputs, src).astype(np.intp),
                self_idx=np.searchsorted(inputs, outputs).astype(np.intp),
                n_out=len(outputs),
            )
        )
    return GraphBatch(sets[-1], graph.node_features[sets[-1]], hops, nodes)


def full_block(graph: TripGraph, n_layers: int = 2) -> GraphBatch:
    """All nodes, all edges: the full-graph computation."""
    n = graph.n_nodes
    dst = np.repeat(np.arange(n), graph.degrees()).astype(np.intp)
    hop = Hop(dst=dst, src=graph.indices.astype(np.intp), self_idx=np.arange(n, dtype=np.intp), n_out=n)
    all_nodes = np.arange(n)
    return GraphBatch(all_nodes, graph.node_features, [hop] * n_layers, all_nodes)


# -- model --------------------------------------------------------------------


class GatLayer(Module):
    def __init__(self, fan_in: int, fan_out: int, attention_dropout: float, rng: np.random.Generator):
        super().__init__()
        self.weight = self.add_param("weight", glorot_uniform(rng, fan_in, fan_out))
        self.attention = self.add_param("attention", glorot_uniform(rng, 2 * fan_out, 1, shape=(1, 2 * fan_out)))
        self.fan_out = fan_out
        self.attention_dropout = attention_dropout

    def attention_parts(self) -> tuple[ad.Node, ad.Node]:
        a_dst = ad.transpose(ad.slice_cols(self.attention, 0, self.fan_out))
        a_src = ad.transpose(ad.slice_cols(self.attention, self.fan_out, 2 * self.fan_out))
        return a_dst, a_src

    def coefficients(self, h: ad.Node, hop: Hop, train: bool = False, rng=None) -> tuple[ad.Node, ad.Node]:
        wh = ad.matmul(h, self.weight)
        a_dst, a_src = self.attention_parts()
        s_dst = ad.matmul(wh, a_dst)
        s_src = ad.matmul(wh, a_src)
        e = ad.leaky_relu(ad.add(ad.gather_rows(s_dst, hop.self_idx[hop.dst]), ad.gather_rows(s_src, hop.src)), LEAKY_SLOPE)
        alpha = ad.segment_softmax(e, hop.dst, hop.n_out)
        alpha = ad.dropout(alpha, self.attention_dropout, rng, train)
        return wh, alpha

    def __call__(self, h: ad.Node, hop: Hop, train: bool = False, rng=None) -> ad.Node:
        wh, alpha = self.coefficients(h, hop, train, rng)
        msg = ad.scale_rows(ad.gather_rows(wh, hop.src), alpha)
        return ad.tanh(ad.segment_sum(msg, hop.dst, hop.n_out))


class GatModel(Module):
    """Two single-head attention layers (tanh) and a linear scalar head."""

    def __init__(self, in_dim: int, hidden: int = 16, attention_dropout: float = 0.3, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.in_dim, self.hidden, self.seed = in_dim, hidden, seed
        self.attention_dropout = attention_dropout
        self.layers = [
            self.add_module("gat0", GatLayer(in_dim, hidden, attention_dropout, rng)),
            self.add_module("gat1", GatLayer(hidden, hidden, attention_dropout, rng)),
        ]
        self.head = self.add_module("head", Dense(hidden, 1, "identity", rng))

    def architecture(self) -> dict:
        return {"class": "GatModel", "in_dim": self.in_dim, "hidden": self.hidden, "attention_dropout": self.attention_dropout}

    def forward(self, batch: GraphBatch, train: bool = False, rng=None) -> ad.Node:
        if batch.features.shape[1] != self.in_dim:
            raise ContractError(f"model expects {self.in_dim} node features, got {batch.features.shape[1]}")
        h = ad.constant(batch.features)
        for layer, hop in zip(self.layers, batch.hops):
            h = layer(h, hop, train, rng)
        return self.head(h)


class GraphNodeData:
    """Target nodes of one split, served as sampled 2-hop batches."""

    def __init__(self, graph: TripGraph, nodes: np.ndarray, targets: np.ndarray, fanout: int | None = 8):
        self.graph = graph
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
        self.fanout = fanout

    def __len__(self) -> int:
        return len(self.nodes)

    def batch(self, index: np.ndarray, rng: np.random.Generator):
        nodes = self.nodes[index]
        return sample_block(self.graph, nodes, 2, self.fanout, rng), self.targets[nodes]


class FullGraphEval(GraphNodeData):
    """Eval-mode view: full neighbourhoods, so results are sampling-free."""

    def __init__(self, graph: TripGraph, nodes: np.ndarray, targets: np.ndarray):
        super().__init__(graph, nodes, targets, fanout=None)
        self._cache: dict[bytes, GraphBatch] = {}

    def batch(self, index: np.ndarray, rng=None):
        nodes = self.nodes[index]
        key = nodes.tobytes()
        if key not in self._cache:
            self._cache[key] = sample_block(self.graph, nodes, 2, None)
        return self._cache[key], self.targets[nodes]


GAT_TRAIN = TrainConfig(max_epochs=40, batch_size=256, patience=7, seed=0, eval_batch_size=100_000)


def fit_gat(
    graph: TripGraph,
    targets: np.ndarray,
    train_nodes: np.ndarray,
    val_nodes: np.ndarray,
    train_cfg: TrainConfig = GAT_TRAIN,
    adamw: AdamWConfig = AdamWConfig(learning_rate=5e-3, weight_decay=1e-5),
    hidden: int = 16,
    attention_dropout: float = 0.3,
    fanout: int = 8,
) -> GatModel:
    """Train on neighbour-sampled batches of ``train_nodes``; validate in eval mode."""
    if np.intersect1d(train_nodes, val_nodes).size:
        raise ContractError("train and validation node sets overlap")
    model = GatModel(graph.node_features.shape[1], hidden, attention_dropout, seed=train_cfg.seed)
    result: TrainResult = train(
        model,
        GraphNodeData(graph, train_nodes, targets, fanout),
        FullGraphEval(graph, val_nodes, targets),
        train_cfg,
        adamw,
    )
    model.history = result.history
    return model


def predict(model: GatModel, graph: TripGraph, nodes: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode full-graph predictions for ``nodes`` (default: all)."""
    out = model.forward(full_block(graph)).value[:, 0]
    return out if nodes is None else out[np.asarray(nodes)]


def predict_batched(model: GatModel, graph: TripGraph, nodes: np.ndarray, fanout: int | None = None, batch_size: int = 256, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    nodes = np.asarray(nodes)
    out = []
    for start in range(0, len(nodes), batch_size):
        out.append(model.forward(sample_block(graph, nodes[start : start + batch_size], 2, fanout, rng)).value[:, 0])
    return np.concatenate(out) if out else np.empty(0)


def attention_weights(model: GatModel, graph: TripGraph, layer: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode attention (dst, src, alpha) of one layer over the full graph."""
    block = full_block(graph)
    h = ad.constant(block.features)
    for li in range(layer):
        h = model.layers[li](h, block.hops[li])
    _, alpha = model.layers[layer].coefficients(h, block.hops[layer])
    hop = block.hops[layer]
    return hop.dst, hop.src, alpha.value[:, 0]


def ensemble_predict(models: Sequence[GatModel], graph: TripGraph, nodes: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-node mean and population variance across ensemble members."""
    if len(models) < 2:
        raise EnsembleError(f"an ensemble needs at least 2 members, got {len(models)}")
    preds = np.stack([predict(m, graph, nodes) for m in models])
    # moments about the first member, so identical members give exactly
    # their shared prediction and zero variance
    d = preds - preds[0]
    shift = d.mean(axis=0)
    return preds[0] + shift, np.mean((d - shift) ** 2, axis=0)
