"""Period-folding temporal regressor over sliding windows of time-sorted trips.

Each block detects a dominant period p per window, folds the (zero-padded)
10-step sequence into a (segments x p) grid, applies a dense map across
segments and then a tanh dense map across the period axis, unfolds, and adds
the result back as a residual. Dense maps stand in for 2-D convolutions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import ColumnTable
from .errors import ContractError, InsufficientDataError, ShapeError
from .nn import AdamWConfig, Dense, Module, TrainConfig, glorot_uniform, train

WINDOW_LEN = 10
MIN_PERIOD, MAX_PERIOD = 2, WINDOW_LEN
DEFAULT_PERIOD = WINDOW_LEN // 2


@dataclass
class WindowDataset:
    """windows[i] covers series rows [i, i+window_len); targets[i] is the fare
    at row i+window_len. ``end_rows`` holds those target row positions."""

    windows: np.ndarray  # (n_windows, window_len, n_features)
    targets: np.ndarray  # (n_windows,)
    end_rows: np.ndarray
    window_len: int = WINDOW_LEN

    def __len__(self) -> int:
        return len(self.windows)

    def batch(self, index: np.ndarray, rng=None):
        return self.windows[index], self.targets[index].reshape(-1, 1)

    def subset(self, index: np.ndarray) -> "WindowDataset":
        return WindowDataset(self.windows[index], self.targets[index], self.end_rows[index], self.window_len)


def make_windows(
    table: ColumnTable,
    feature_columns: Sequence[str],
    target_column: str = "fare_amount",
    window_len: int = WINDOW_LEN,
    time_column: str = "pickup_datetime",
) -> WindowDataset:
    """Slide a length-``window_len`` window over the table in its row order.

    The table must already be sorted by ``time_column``.
    """
    n = table.n_rows
    if n <= window_len:
        raise InsufficientDataError(f"series of {n} rows is too short for windows of {window_len}")
    t = table.column(time_column)
    if np.any(np.diff(t) < 0):
        raise ContractError(f"table is not sorted by {time_column}")
    x = table.matrix(feature_columns)
    n_win = n - window_len
    idx = np.arange(n_win)[:, None] + np.arange(window_len)[None, :]
    return WindowDataset(x[idx], table.column(target_column)[window_len:].copy(), np.arange(window_len, n), window_len)


def _amplitudes(window: np.ndarray) -> np.ndarray:
    """Channel-averaged rfft amplitude of a (T,) or (T, C) window, DC dropped."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    return np.abs(np.fft.rfft(w, axis=0)).mean(axis=1)[1:]


def period_from_amplitudes(amp: np.ndarray, scale: float, window_len: int = WINDOW_LEN) -> int:
    # a spectrum at round-off level counts as empty
    if amp.max() <= 1e-10 * scale:
        return window_len // 2
    f = int(np.argmax(amp)) + 1  # first maximum = lowest frequency
    return int(math.floor(window_len / f + 0.5))


def dominant_period(window: np.ndarray) -> int:
    """Period of the strongest nonzero frequency; 5 for a flat window."""
    w = np.asarray(window, dtype=np.float64)
    T = w.shape[0]
    amp = _amplitudes(w)
    return period_from_amplitudes(amp, float(np.abs(w).sum()), T)


def window_periods(h: np.ndarray, window_len: int = WINDOW_LEN) -> np.ndarray:
    """Dominant period per window of an (m*T, C) row-stacked hidden state."""
    m = h.shape[0] // window_len
    w = h.reshape(m, window_len, -1)
    amp = np.abs(np.fft.rfft(w, axis=1)).mean(axis=2)[:, 1:]
    scale = np.abs(w).sum(axis=(1, 2))
    f = np.argmax(amp, axis=1) + 1
    p = np.floor(window_len / f + 0.5).astype(np.int64)
    return np.where(amp.max(axis=1) <= 1e-10 * scale, window_len // 2, p)


# -- fold / unfold index maps -------------------------------------------------


@lru_cache(maxsize=512)
def fold_indices(m: int, p: int, d: int, window_len: int = WINDOW_LEN) -> dict[str, np.ndarray]:
    """Gather maps for the fold-transform-unfold pass over m windows.

    ``segment``: flat (w,t,c) input (plus a trailing zero slot for padding)
    -> rows (w,j,c), cols k, where t = k*p + j.
    ``period``: flat (w,j,c,k) -> rows (w,k,c), cols j.
    ``unfold``: flat (w,k,c,j) -> rows (w,t), cols c for t < window_len.
    """
    s = -(-window_len // p)
    w, j, c, k = np.meshgrid(np.arange(m), np.arange(p), np.arange(d), np.arange(s), indexing="ij")
    t = k * p + j
    zero_slot = m * window_len * d
    seg = np.where(t < window_len, (w * window_len + np.minimum(t, window_len - 1)) * d + c, zero_slot)

    w2, k2, c2, j2 = np.meshgrid(np.arange(m), np.arange(s), np.arange(d), np.arange(p), indexing="ij")
    per = ((w2 * p + j2) * d + c2) * s + k2

    w3, t3, c3 = np.meshgrid(np.arange(m), np.arange(window_len), np.arange(d), indexing="ij")
    unf = ((w3 * s + t3 // p) * d + c3) * p + t3 % p
    return {"segment": seg.ravel(), "period": per.ravel(), "unfold": unf.ravel(), "segments": s}


def fold(x: np.ndarray, p: int) -> np.ndarray:
    """Plain-array fold of a (T, C) sequence into (segments, p, C), zero-padded."""
    T = x.shape[0]
    s = -(-T // p)
    pad = np.zeros((s * p,) + x.shape[1:])
    pad[:T] = x
    return pad.reshape((s, p) + x.shape[1:])


def unfold(grid: np.ndarray, length: int) -> np.ndarray:
    s, p = grid.shape[:2]
    return grid.reshape((s * p,) + grid.shape[2:])[:length]


class FoldTransform(Module):
    """Segment-axis and period-axis dense maps for one period length."""

    def __init__(self, p: int, rng: np.random.Generator, window_len: int = WINDOW_LEN):
        super().__init__()
        s = -(-window_len // p)
        self.p, self.s = p, s
        self.w_seg = self.add_param("w_seg", glorot_uniform(rng, s, s))
        self.b_seg = self.add_param("b_seg", np.zeros((1, s)))
        self.w_per = self.add_param("w_per", glorot_uniform(rng, p, p))
        self.b_per = self.add_param("b_per", np.zeros((1, p)))

    def __call__(self, h: ad.Node, m: int, window_len: int = WINDOW_LEN) -> ad.Node:
        d = h.shape[1]
        maps = fold_indices(m, self.p, d, window_len)
        flat = ad.concat_rows([ad.reshape(h, m * window_len * d, 1), ad.constant(np.zeros((1, 1)))])
        a = ad.reshape(ad.gather_rows(flat, maps["segment"]), m * self.p * d, self.s)
        a = ad.broadcast_add_row(ad.matmul(a, self.w_seg), self.b_seg)
        b = ad.reshape(ad.gather_rows(ad.reshape(a, a.shape[0] * self.s, 1), maps["period"]), m * self.s * d, self.p)
        b = ad.tanh(ad.broadcast_add_row(ad.matmul(b, self.w_per), self.b_per))
        out = ad.gather_rows(ad.reshape(b, b.shape[0] * self.p, 1), maps["unfold"])
        return ad.reshape(out, m * window_len, d)


class TimesBlockLite(Module):
    def __init__(self, d_model: int, dropout: float, rng: np.random.Generator, window_len: int = WINDOW_LEN):
        super().__init__()
        self.d_model, self.dropout, self.window_len = d_model, dropout, window_len
        self.folds = {p: self.add_module(f"p{p}", FoldTransform(p, rng, window_len)) for p in range(MIN_PERIOD, window_len + 1)}

    def __call__(self, h: ad.Node, train: bool = False, rng=None, periods: np.ndarray | None = None) -> ad.Node:
        T = self.window_len
        m = h.shape[0] // T
        periods = window_periods(h.value, T) if periods is None else periods
        parts, order = [], []
        for p in np.unique(periods):
            wins = np.flatnonzero(periods == p)
            rows = (wins[:, None] * T + np.arange(T)[None, :]).ravel()
            parts.append(self.folds[int(p)](ad.gather_rows(h, rows), len(wins), T))
            order.append(rows)
        inverse = np.empty(m * T, dtype=np.intp)
        inverse[np.concatenate(order)] = np.arange(m * T)
        z = ad.gather_rows(ad.concat_rows(parts), inverse)
        return ad.add(h, ad.dropout(z, self.dropout, rng, train))


@lru_cache(maxsize=64)
def _pool_matrix(m: int, window_len: int) -> np.ndarray:
    return np.kron(np.eye(m), np.full((1, window_len), 1.0 / window_len))


class TsLiteModel(Module):
    """Embedding, two period-folding blocks, mean pool over time, scalar head."""

    def __init__(self, n_features: int, d_model: int = 16, n_blocks: int = 2, dropout: float = 0.3, seed: int = 0, window_len: int = WINDOW_LEN):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.n_features, self.d_model, self.n_blocks = n_features, d_model, n_blocks
        self.dropout_rate, self.window_len, self.seed = dropout, window_len, seed
        self.embed = self.add_module("embed", Dense(n_features, d_model, "identity", rng))
        self.blocks = [self.add_module(f"block{i}", TimesBlockLite(d_model, dropout, rng, window_len)) for i in range(n_blocks)]
        self.head = self.add_module("head", Dense(d_model, 1, "identity", rng))
        self.history: list = []

    def architecture(self) -> dict:
        return {
            "class": "TsLiteModel",
            "n_features": self.n_features,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "dropout": self.dropout_rate,
            "window_len": self.window_len,
        }

    def forward(self, windows: np.ndarray, train: bool = False, rng=None) -> ad.Node:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.window_len, self.n_features):
            raise ShapeError(f"expected windows (m, {self.window_len}, {self.n_features}), got {windows.shape}")
        m = windows.shape[0]
        h = self.embed(ad.constant(windows.reshape(m * self.window_len, self.n_features)))
        for block in self.blocks:
            h = block(h, train, rng)
        return self.head(ad.matmul(ad.constant(_pool_matrix(m, self.window_len)), h))


TSLITE_TRAIN = TrainConfig(max_epochs=30, batch_size=128, patience=7, seed=0)
TSLITE_ADAMW = AdamWConfig(learning_rate=5e-4, weight_decay=1e-5)


def fit_tslite(
    train_windows: WindowDataset,
    val_windows: WindowDataset,
    train_cfg: TrainConfig = TSLITE_TRAIN,
    adamw: AdamWConfig = TSLITE_ADAMW,
    d_model: int = 16,
    n_blocks: int = 2,
    dropout: float = 0.3,
) -> TsLiteModel:
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise InsufficientDataError("tslite needs non-empty train and validation windows")
    model = TsLiteModel(train_windows.windows.shape[2], d_model, n_blocks, dropout, seed=train_cfg.seed, window_len=train_windows.window_len)
    result = train(model, train_windows, val_windows, train_cfg, adamw)
    model.history = result.history
    return model


def predict(model: TsLiteModel, data: WindowDataset | np.ndarray, batch_size: int = 512) -> np.ndarray:
    windows = data.windows if isinstance(data, WindowDataset) else np.asarray(data)
    out = [model.forward(windows[i : i + batch_size]).value[:, 0] for i in range(0, len(windows), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def write_predictions_csv(path: str | Path, data: WindowDataset, predictions: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_end_row", "prediction", "target"])
        for r, p, t in zip(data.end_rows, predictions, data.targets):
            w.writerow([int(r), repr(float(p)), repr(float(t))])
