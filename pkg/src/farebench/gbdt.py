"""Second-order gradient-boosted regression trees with histogram split finding."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class GbdtConfig:
    max_depth: int = 6
    reg_lambda: float = 1.0
    eta: float = 0.1
    gamma: float = 0.0
    n_rounds: int = 500
    early_stop_rounds: int = 20
    n_bins: int = 256
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ContractError("max_depth must be >= 1")
        if self.n_bins < 2:
            raise ContractError("n_bins must be >= 2")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ContractError("lambda and gamma must be non-negative")
        if not 0 <= self.eta <= 1:
            raise ContractError("eta must lie in [0, 1]")


def leaf_weight(g_sum: float, h_sum: float, reg_lambda: float) -> float:
    return -g_sum / (h_sum + reg_lambda)


def split_gain(gl, hl, gr, hr, reg_lambda: float, gamma: float):
    """Loss reduction of a split; works on scalars and arrays alike."""
    return 0.5 * (gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - (gl + gr) ** 2 / (hl + hr + reg_lambda)) - gamma


# -- binning ------------------------------------------------------------------


def compute_bin_edges(x: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Per-feature split candidates.

    With at most ``n_bins`` distinct values every distinct value but the
    largest is a candidate (so histogram and exact search coincide).
    Otherwise candidates are the distinct interior quantiles.
    """
    edges = []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        if len(u) <= n_bins:
            edges.append(u[:-1])
        else:
            q = np.quantile(x[:, j], np.arange(1, n_bins) / n_bins)
            edges.append(np.unique(q))
    return edges


def bin_features(x: np.ndarray, edges: Sequence[np.ndarray]) -> np.ndarray:
    """Bin b holds values with edges[b-1] < x <= edges[b]."""
    out = np.empty(x.shape, dtype=np.int32)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, x[:, j], side="left")
    return out


# -- trees --------------------------------------------------------------------


@dataclass
class Tree:
    """Flat node arrays; node 0 is the root. Leaves have feature == -1."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)

    def add_node(self, depth: int) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.depth.append(depth)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        val = np.asarray(self.value)
        node = np.zeros(len(x), dtype=np.intp)
        rows = np.arange(len(x))
        for _ in range(max(self.depth) if self.depth else 0):
            f = feat[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = x[rows, np.where(inner, f, 0)] <= thr[node]
            node = np.where(inner, np.where(go_left, left[node], right[node]), node)
        return val[node]

    def structure(self, i: int = 0):
        """Nested tuples (feature, threshold, left, right) or ('leaf', value)."""
        if self.is_leaf(i):
            return ("leaf", self.value[i])
        return (self.feature[i], self.threshold[i], self.structure(self.left[i]), self.structure(self.right[i]))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        return cls(**{k: list(v) for k, v in d.items()})


def grow_tree(
    bins: np.ndarray,
    edges: Sequence[np.ndarray],
    grad: np.ndarray,
    hess: np.ndarray,
    cfg: GbdtConfig,
) -> tuple[Tree, np.ndarray]:
    """Grow one tree level by level; returns it with each row's leaf index."""
    n, n_feat = bins.shape
    n_bins = max((len(e) + 1 for e in edges), default=1)
    tree = Tree()
    tree.add_node(0)
    row_node = np.zeros(n, dtype=np.intp)
    frontier = [0]

    for depth in range(cfg.max_depth):
        if not frontier:
            break
        local = np.full(tree.n_nodes, -1, dtype=np.intp)
        local[frontier] = np.arange(len(frontier))
        loc = local[row_node]
        active = loc >= 0
        a_loc = loc[active]
        a_bins = bins[active]
        a_g = grad[active]
        a_h = hess[active]
        k = len(frontier)
        G = np.bincount(a_loc, weights=a_g, minlength=k)
        H = np.bincount(a_loc, weights=a_h, minlength=k)

        best_gain = np.full(k, -np.inf)
        best_feat = np.full(k, -1)
        best_bin = np.full(k, -1)
        for j in range(n_feat):
            nb = len(edges[j])
            if nb == 0:
                continue
            code = a_loc * (nb + 1) + a_bins[:, j]
            hg = np.bincount(code, weights=a_g, minlength=k * (nb + 1)).reshape(k, nb + 1)
            hh = np.bincount(code, weights=a_h, minlength=k * (nb + 1)).reshape(k, nb + 1)
            gl = np.cumsum(hg, axis=1)[:, :nb]
            hl = np.cumsum(hh, axis=1)[:, :nb]
            gr = G[:, None] - gl
            hr = H[:, None] - hl
            gain = split_gain(gl, hl, gr, hr, cfg.reg_lambda, cfg.gamma)
            ok = (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight) & (gain > 0)
            gain = np.where(ok, gain, -np.inf)
            b = np.argmax(gain, axis=1)
            g = gain[np.arange(k), b]
            better = g > best_gain
            best_gain = np.where(better, g, best_gain)
            best_feat = np.where(better, j, best_feat)
            best_bin = np.where(better, b, best_bin)

        next_frontier = []
        for li, node in enumerate(frontier):
            if best_feat[li] < 0:
                tree.value[node] = leaf_weight(G[li], H[li], cfg.reg_lambda)
                continue
            j, b = int(best_feat[li]), int(best_bin[li])
            tree.feature[node] = j
            tree.threshold[node] = float(edges[j][b])
            lchild = tree.add_node(depth + 1)
            rchild = tree.add_node(depth + 1)
            tree.left[node], tree.right[node] = lchild, rchild
            members = row_node == node
            row_node[members] = np.where(bins[members, j] <= b, lchild, rchild)
            next_frontier += [lchild, rchild]
        frontier = next_frontier

    for node in frontier:
        members = row_node == node
        tree.value[node] = leaf_weight(float(grad[members].sum()), float(hess[members].sum()), cfg.reg_lambda)
    return tree, row_node


# -- booster ------------------------------------------------------------------


@dataclass
class Booster:
    base_score: float
    trees: list[Tree]
    config: GbdtConfig
    bin_edges: list[np.ndarray]
    n_features: int
    history: list[float] = field(default_factory=list)
    best_round: int = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ContractError(f"booster expects {self.n_features} features, got shape {x.shape}")
        out = np.full(len(x), self.base_score)
        for t in self.trees:
            out += self.config.eta * t.predict(x)
        return out

    def to_json(self) -> dict:
        return {
            "base_score": self.base_score,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "best_round": self.best_round,
            "history": self.history,
            "bin_edges": [e.tolist() for e in self.bin_edges],
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Booster":
        return cls(
            base_score=d["base_score"],
            trees=[Tree.from_json(t) for t in d["trees"]],
            config=GbdtConfig(**d["config"]),
            bin_edges=[np.asarray(e, dtype=np.float64) for e in d["bin_edges"]],
            n_features=d["n_features"],
            history=list(d.get("history", [])),
            best_round=d.get("best_round", 0),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Booster":
        return cls.from_json(json.loads(Path(path).read_text()))


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return math.sqrt(float(np.mean((a - b) ** 2)))


def fit(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_valid: np.ndarray,
    y_valid: np.ndarray,
    cfg: GbdtConfig = GbdtConfig(),
) -> Booster:
    """Boost squared-error trees; stop when validation RMSE stalls.

    The returned booster is truncated to the best round and carries the full
    per-round validation RMSE history.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    x_valid = np.asarray(x_valid, dtype=np.float64)
    y_valid = np.asarray(y_valid, dtype=np.float64).ravel()
    if x_train.ndim != 2 or len(x_train) < 2 or len(x_train) != len(y_train):
        raise DataError(f"need >= 2 aligned training rows, got X {x_train.shape}, y {y_train.shape}")
    if len(x_valid) == 0 or len(x_valid) != len(y_valid) or x_valid.shape[1] != x_train.shape[1]:
        raise DataError("validation set empty or misaligned with training features")
    if not (np.isfinite(x_train).all() and np.isfinite(y_train).all()):
        raise DataError("training data contains non-finite values")

    edges = compute_bin_edges(x_train, cfg.n_bins)
    bins = bin_features(x_train, edges)
    base = float(y_train.mean())
    pred = np.full(len(y_train), base)
    vpred = np.full(len(y_valid), base)
    hess = np.ones(len(y_train))
    trees: list[Tree] = []
    history: list[float] = []
    best, best_round, stale = math.inf, 0, 0

    for r in range(cfg.n_rounds):
        tree, leaf = grow_tree(bins, edges, pred - y_train, hess, cfg)
        trees.append(tree)
        pred = pred + cfg.eta * np.asarray(tree.value)[leaf]
        vpred = vpred + cfg.eta * tree.predict(x_valid)
        score = _rmse(vpred, y_valid)
        history.append(score)
        if score < best:
            best, best_round, stale = score, r + 1, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_rounds:
                break

    return Booster(base, trees[:best_round], cfg, edges, x_train.shape[1], history, best_round)


def predict(booster: Booster, x: np.ndarray) -> np.ndarray:
    return booster.predict(x)


@dataclass
class GridResult:
    best_depth: int
    best_lambda: float
    scores: dict[tuple[int, float], float]
    booster: Booster


def grid_search(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_valid: np.ndarray,
    y_valid: np.ndarray,
    depths: Sequence[int] = (4, 6, 8),
    lambdas: Sequence[float] = (0.1, 1.0, 10.0),
    cfg: GbdtConfig = GbdtConfig(),
) -> GridResult:
    """One booster per (depth, lambda); lowest best-round validation RMSE wins,
    ties going to the smaller depth and then the larger lambda."""
    if not depths or not lambdas:
        raise ContractError("grid search needs non-empty depth and lambda grids")
    scores: dict[tuple[int, float], float] = {}
    boosters: dict[tuple[int, float], Booster] = {}
    for d in depths:
        for lam in lambdas:
            try:
                b = fit(x_train, y_train, x_valid, y_valid, replace(cfg, max_depth=int(d), reg_lambda=float(lam)))
            except DataError as exc:
                raise DataError(f"grid cell depth={d}, lambda={lam}: {exc}") from exc
            scores[(int(d), float(lam))] = min(b.history)
            boosters[(int(d), float(lam))] = b
    best = min(scores, key=lambda c: (scores[c], c[0], -c[1]))
    return GridResult(best[0], best[1], scores, boosters[best])
