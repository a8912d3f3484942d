"""Layers, AdamW, gradient clipping, plateau LR schedule, early stopping and
the shared mini-batch training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, NumericFailure

log = logging.getLogger(__name__)

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}

IMPROVEMENT_EPS = 1e-6


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, int] | None = None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Base class: subclasses register parameters in ``self._params`` order."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add_param(self, name: str, value: np.ndarray) -> Node:
        node = ad.param(value, name=name)
        self._params[name] = node
        return node

    def add_module(self, prefix: str, module: "Module") -> "Module":
        for name, node in module.named_parameters():
            self._params[f"{prefix}.{name}"] = node
        return module

    def named_parameters(self) -> list[tuple[str, Node]]:
        return list(self._params.items())

    def parameters(self) -> list[Node]:
        return list(self._params.values())

    def snapshot(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def restore(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p.value[...] = v

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.parameters()]) if self._params else np.empty(0)

    def load_flat(self, flat: np.ndarray) -> None:
        expected = sum(p.value.size for p in self.parameters())
        if expected != len(flat):
            raise ContractError(f"checkpoint holds {len(flat)} values, model expects {expected}")
        offset = 0
        for p in self.parameters():
            n = p.value.size
            p.value[...] = flat[offset : offset + n].reshape(p.shape)
            offset += n

    def architecture(self) -> dict:
        return {"class": type(self).__name__}


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, activation: str = "identity", rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.activation = activation
        self.weight = self.add_param("weight", glorot_uniform(rng, fan_in, fan_out))
        self.bias = self.add_param("bias", np.zeros((1, fan_out)))

    def __call__(self, x: Node) -> Node:
        return ACTIVATIONS[self.activation](ad.broadcast_add_row(ad.matmul(x, self.weight), self.bias))


# -- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.epsilon > 0):
            raise ContractError("AdamW needs lr > 0, weight_decay >= 0, epsilon > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("AdamW betas must lie in (0, 1)")


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    cfg: AdamWConfig,
    lr: float | None = None,
) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW update with weight decay decoupled from the gradient term."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    lr = cfg.learning_rate if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ContractError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g
        decayed = p - lr * cfg.weight_decay * p
        out.append(decayed - lr * (state.m[i] / bc1) / (np.sqrt(state.v[i] / bc2) + cfg.epsilon))
    return out, state


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        return [g * s for g in grads], norm
    return list(grads), norm


# -- schedules ----------------------------------------------------------------


class PlateauScheduler:
    """Multiply the LR by ``factor`` once ``patience`` epochs pass without
    improvement, then restart the count. Never drops below ``min_lr``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, min_lr: float = 1e-6, threshold: float = IMPROVEMENT_EPS):
        if not 0 < factor < 1:
            raise ContractError("plateau factor must lie in (0, 1)")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    """Patience counter over a minimised metric.

    The snapshot tracks the exact minimum, while only improvements larger
    than ``threshold`` reset patience, so float jitter cannot keep training
    alive.
    """

    def __init__(self, patience: int = 7, threshold: float = IMPROVEMENT_EPS):
        if patience < 1:
            raise ContractError("patience must be >= 1")
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.best_epoch = -1
        self._reference = math.inf
        self.stale = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record ``metric``; returns True if it is a new best."""
        if metric < self._reference - self.threshold:
            self._reference = metric
            self.stale = 0
        else:
            self.stale += 1
        if metric < self.best:
            self.best, self.best_epoch = metric, epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 256
    clip_max_norm: float = 1.0
    patience: int = 7
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    seed: int = 0
    monitor: str = "loss"  # "loss" (MSE) or "mae"
    eval_batch_size: int | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ContractError("plateau_factor must lie in (0, 1)")
        if self.monitor not in ("loss", "mae"):
            raise ContractError(f"monitor must be 'loss' or 'mae', got {self.monitor!r}")


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, index: np.ndarray, rng: np.random.Generator) -> tuple[Any, np.ndarray]: ...


class Model(Protocol):
    def parameters(self) -> list[Node]: ...

    def forward(self, inputs: Any, train: bool = False, rng: np.random.Generator | None = None) -> Node: ...


class ArrayDataset:
    """Row-indexed (X, y) pairs; y is returned as an (n, k) array."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y = y[:, None] if y.ndim == 1 else y
        if len(self.x) != len(self.y):
            raise ContractError(f"{len(self.x)} inputs but {len(self.y)} targets")

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, index: np.ndarray, rng: np.random.Generator | None = None):
        return self.x[index], self.y[index]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_mae: float
    lr: float


@dataclass
class TrainResult:
    model: Any
    history: list[EpochRecord]
    best_epoch: int
    best_val: float

    def write_history_csv(self, path: str | Path) -> None:
        write_history_csv(self.history, path)


def write_history_csv(history: Sequence[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def evaluate_loss(model: Model, data: Dataset, batch_size: int, seed: int = 0) -> tuple[float, float]:
    """Eval-mode (MSE, MAE) over ``data`` in index order."""
    n = len(data)
    sq = ab = 0.0
    count = 0
    rng = np.random.default_rng(seed)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        inputs, y = data.batch(idx, rng)
        pred = model.forward(inputs, train=False, rng=None).value
        d = pred - y
        sq += float(np.sum(d * d))
        ab += float(np.sum(np.abs(d)))
        count += d.size
    return sq / count, ab / count


def train(
    model: Model,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig = TrainConfig(),
    adamw: AdamWConfig = AdamWConfig(),
) -> TrainResult:
    """Mini-batch AdamW training with clipping, plateau LR and early stopping.

    Returns the model restored to its best-validation snapshot.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ContractError("training and validation sets must be non-empty")
    params = model.parameters()
    state = AdamWState()
    sched = PlateauScheduler(adamw.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    stopper = EarlyStopping(cfg.patience)
    eval_bs = cfg.eval_batch_size or cfg.batch_size
    history: list[EpochRecord] = []
    best_params = [p.value.copy() for p in params]
    lr = adamw.learning_rate

    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            inputs, y = train_data.batch(idx, rng)
            try:
                ad.zero_grads(params)
                loss = ad.mse(model.forward(inputs, train=True, rng=rng), y)
                ad.backward(loss)
            except NumericFailure as exc:
                raise NumericFailure(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise NumericFailure(f"epoch {epoch}, batch {b}: non-finite loss")
            grads, _ = clip_global_norm([p.grad for p in params], cfg.clip_max_norm)
            new, state = adamw_step([p.value for p in params], grads, state, adamw, lr=lr)
            for p, v in zip(params, new):
                p.value[...] = v
            total += loss.item() * len(idx)

        val_mse, val_mae = evaluate_loss(model, val_data, eval_bs, seed=cfg.seed)
        metric = val_mse if cfg.monitor == "loss" else val_mae
        if not math.isfinite(metric):
            raise NumericFailure(f"epoch {epoch}: non-finite validation loss")
        history.append(EpochRecord(epoch, total / n, val_mse, val_mae, lr))
        if stopper.update(epoch, metric):
            best_params = [p.value.copy() for p in params]
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, total / n, val_mse, lr)
        if stopper.should_stop:
            break
        lr = sched.step(metric)

    for p, v in zip(params, best_params):
        p.value[...] = v
    best = history[stopper.best_epoch - 1]
    return TrainResult(model, history, stopper.best_epoch, best.val_loss if cfg.monitor == "loss" else best.val_mae)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(prefix: str | Path, model: Module, config: dict | None = None, seed: int | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (float64 LE)."""
    prefix = Path(prefix)
    manifest = {
        "architecture": model.architecture(),
        "config": config or {},
        "seed": seed,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()],
        "dtype": "<f8",
    }
    jpath, bpath = prefix.with_suffix(".json"), prefix.with_suffix(".bin")
    jpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    bpath.write_bytes(model.flat_parameters().astype("<f8").tobytes())
    return jpath, bpath


def load_checkpoint(prefix: str | Path) -> tuple[dict, np.ndarray]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    return manifest, flat


def config_dict(cfg) -> dict:
    return asdict(cfg)
