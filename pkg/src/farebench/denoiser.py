"""Denoising autoencoder that maps noisy feature rows to clean reconstructions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dataset import ColumnTable
from .errors import AlignmentError, ContractError
from .nn import AdamWConfig, ArrayDataset, Dense, Module, TrainConfig, TrainResult, train

DENOISER_TRAIN = TrainConfig(max_epochs=60, batch_size=128, patience=10, seed=0)
DENOISER_ADAMW = AdamWConfig(learning_rate=1e-3, weight_decay=1e-5)
VAL_FRACTION = 0.1


@dataclass(frozen=True)
class AutoencoderSpec:
    input_dim: int
    encoder_dims: tuple[int, ...] = (32, 16)

    @property
    def decoder_dims(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_dims[:-1]))

    @property
    def latent_dim(self) -> int:
        return self.encoder_dims[-1]


class DenoiserModel(Module):
    def __init__(self, spec: AutoencoderSpec, columns: Sequence[str], seed: int = 0):
        super().__init__()
        if spec.input_dim != len(columns):
            raise ContractError(f"spec input_dim {spec.input_dim} != {len(columns)} columns")
        self.spec = spec
        self.columns = tuple(columns)
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = [spec.input_dim, *spec.encoder_dims, *spec.decoder_dims, spec.input_dim]
        self.layers: list[Dense] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = "identity" if i == len(dims) - 2 else "relu"
            self.layers.append(self.add_module(f"layer{i}", Dense(a, b, act, rng)))
        self.history: list = []

    def architecture(self) -> dict:
        return {
            "class": "DenoiserModel",
            "input_dim": self.spec.input_dim,
            "encoder_dims": list(self.spec.encoder_dims),
            "columns": list(self.columns),
        }

    def forward(self, x, train: bool = False, rng=None) -> ad.Node:
        h = x if isinstance(x, ad.Node) else ad.constant(x)
        for layer in self.layers:
            h = layer(h)
        return h

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.spec.input_dim:
            raise ContractError(f"denoiser expects {self.spec.input_dim} features, got {x.shape[1]}")
        return self.forward(x).value


def fit_denoiser(
    noisy_train: ColumnTable,
    clean_train: ColumnTable,
    columns: Sequence[str] | None = None,
    spec: AutoencoderSpec | None = None,
    train_cfg: TrainConfig = DENOISER_TRAIN,
    adamw: AdamWConfig = DENOISER_ADAMW,
) -> DenoiserModel:
    """Train input=noisy rows, target=clean rows (both already normalized).

    A seeded tenth of the rows is held out for early stopping. The training
    history is attached as ``model.history``.
    """
    if noisy_train.n_rows != clean_train.n_rows:
        raise AlignmentError(f"noisy has {noisy_train.n_rows} rows, clean has {clean_train.n_rows}")
    columns = tuple(noisy_train.column_names if columns is None else columns)
    spec = spec or AutoencoderSpec(input_dim=len(columns))
    x = noisy_train.matrix(columns)
    y = clean_train.matrix(columns)

    rng = np.random.default_rng([train_cfg.seed, 17])
    perm = rng.permutation(len(x))
    n_val = max(1, int(len(x) * VAL_FRACTION))
    val, tr = perm[:n_val], perm[n_val:]

    model = DenoiserModel(spec, columns, seed=train_cfg.seed)
    result: TrainResult = train(model, ArrayDataset(x[tr], y[tr]), ArrayDataset(x[val], y[val]), train_cfg, adamw)
    model.history = result.history
    return model


def denoise(model: DenoiserModel, noisy: ColumnTable, replace_columns: Sequence[str] | None = None) -> ColumnTable:
    """Apply the denoiser in eval mode; the output keeps the input schema.

    Only ``replace_columns`` (default: all model columns) take reconstructed
    values; every other column passes through untouched.
    """
    missing = [c for c in model.columns if c not in noisy.columns]
    if missing:
        raise ContractError(f"table lacks denoiser columns {missing}")
    recon = model.reconstruct(noisy.matrix(model.columns))
    out = noisy
    targets = model.columns if replace_columns is None else tuple(replace_columns)
    for j, c in enumerate(model.columns):
        if c in targets:
            out = out.with_column(c, recon[:, j], noisy.mask(c))
    return replace(out, norm_stats=noisy.norm_stats)
