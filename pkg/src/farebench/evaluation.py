"""Accuracy, binned error, calibration, uncertainty and OOD reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ContractError, InsufficientDataError

VARIANTS = ("clean", "noisy", "denoised")
PROTOCOLS = ("in_distribution", "ood")
NEAR_ZERO = 0.01
CALIBRATION_METHOD = "mean predicted vs mean actual within deciles of the prediction"


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if len(p) != len(a):
        raise ContractError(f"{len(p)} predictions for {len(a)} actuals")
    return p, a


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    mse: float
    rmse: float
    r2: float | None  # None when the actuals are constant


def regression_metrics(pred, actual) -> RegressionMetrics:
    p, a = _pair(pred, actual)
    if len(p) == 0:
        raise ContractError("metrics need at least one row")
    err = p - a
    mse = float(np.mean(err * err))
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - float(np.sum(err * err)) / ss_tot
    return RegressionMetrics(float(np.mean(np.abs(err))), mse, math.sqrt(mse), r2)


@dataclass(frozen=True)
class AccuracyResult:
    accuracy: float | None
    n_used: int
    n_excluded: int


def custom_accuracy(pred, actual, tol: float = 0.10, min_abs: float = NEAR_ZERO) -> AccuracyResult:
    """Share of rows with |pred - actual| <= tol * |actual|.

    Rows whose |actual| is below ``min_abs`` are left out and counted.
    """
    p, a = _pair(pred, actual)
    keep = np.abs(a) >= min_abs
    n_used = int(keep.sum())
    if n_used == 0:
        return AccuracyResult(None, 0, len(a))
    hit = np.abs(p[keep] - a[keep]) <= tol * np.abs(a[keep])
    return AccuracyResult(float(hit.mean()), n_used, len(a) - n_used)


def decile_edges(values: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Interior equal-frequency edges (type-7 quantiles).

    The quantile position is split with integer arithmetic so an edge that
    lands exactly on an order statistic is that value, not a rounding away.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise InsufficientDataError("decile edges of an empty sample")
    edges = []
    for i in range(1, n_bins):
        lo, rem = divmod((n - 1) * i, n_bins)
        hi = min(lo + 1, n - 1)
        edges.append(x[lo] + (rem / n_bins) * (x[hi] - x[lo]) if rem else x[lo])
    return np.array(edges)


def assign_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index per value; a value equal to an edge falls in the lower bin."""
    return np.searchsorted(edges, values, side="left")


@dataclass(frozen=True)
class BinStat:
    bin_lo: float
    bin_hi: float
    count: int
    mae: float | None


def binwise_mae(pred, actual, n_bins: int = 10) -> list[BinStat]:
    p, a = _pair(pred, actual)
    if len(a) < n_bins:
        raise InsufficientDataError(f"{len(a)} rows cannot fill {n_bins} bins")
    edges = decile_edges(a, n_bins)
    bins = assign_bins(a, edges)
    bounds = np.concatenate([[a.min()], edges, [a.max()]])
    out = []
    for b in range(n_bins):
        m = bins == b
        cnt = int(m.sum())
        out.append(BinStat(float(bounds[b]), float(bounds[b + 1]), cnt, float(np.mean(np.abs(p[m] - a[m]))) if cnt else None))
    return out


@dataclass(frozen=True)
class CalibrationBin:
    mean_pred: float
    mean_actual: float
    count: int


def ece_from_curve(curve: Sequence[CalibrationBin]) -> float:
    n = sum(c.count for c in curve)
    return float(sum(c.count / n * abs(c.mean_pred - c.mean_actual) for c in curve))


def calibration_curve(pred, actual, n_bins: int = 10) -> tuple[list[CalibrationBin], float]:
    """Reliability curve over prediction deciles, and its expected calibration error."""
    p, a = _pair(pred, actual)
    if len(p) < n_bins:
        raise InsufficientDataError(f"{len(p)} rows cannot fill {n_bins} bins")
    bins = assign_bins(p, decile_edges(p, n_bins))
    curve = []
    for b in range(n_bins):
        m = bins == b
        if m.any():
            curve.append(CalibrationBin(float(p[m].mean()), float(a[m].mean()), int(m.sum())))
    return curve, ece_from_curve(curve)


@dataclass(frozen=True)
class UncertaintyStats:
    mean_interval_width: float
    coverage_2sigma: float


def uncertainty_eval(mean_pred, variance, actual) -> UncertaintyStats:
    """Coverage and mean width of the mean +/- 2 sigma interval."""
    m, a = _pair(mean_pred, actual)
    v = np.asarray(variance, dtype=np.float64).ravel()
    if len(v) != len(m):
        raise ContractError(f"{len(v)} variances for {len(m)} predictions")
    if np.any(v < 0):
        raise ContractError("variance must be non-negative")
    sd = np.sqrt(v)
    covered = np.abs(a - m) <= 2.0 * sd
    return UncertaintyStats(float(np.mean(4.0 * sd)), float(covered.mean()))


@dataclass
class EvalReport:
    mae: float
    mse: float
    rmse: float
    r2: float | None
    custom_acc_10pct: float | None
    accuracy_excluded: int
    bin_mae: list[BinStat]
    calibration: list[CalibrationBin]
    ece: float
    dataset_variant: str
    protocol: str
    n: int
    uncertainty: UncertaintyStats | None = None
    model: str | None = None
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["calibration_method"] = CALIBRATION_METHOD
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d.pop("calibration_method", None)
        d["bin_mae"] = [BinStat(**b) for b in d["bin_mae"]]
        d["calibration"] = [CalibrationBin(**c) for c in d["calibration"]]
        if d.get("uncertainty") is not None:
            d["uncertainty"] = UncertaintyStats(**d["uncertainty"])
        return cls(**d)


def evaluate(
    pred,
    actual,
    variant: str,
    protocol: str = "in_distribution",
    variance=None,
    n_bins: int = 10,
    tol: float = 0.10,
    min_abs: float = NEAR_ZERO,
    model: str | None = None,
) -> EvalReport:
    if variant not in VARIANTS:
        raise ContractError(f"unknown dataset variant {variant!r}")
    if protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {protocol!r}")
    p, a = _pair(pred, actual)
    reg = regression_metrics(p, a)
    acc = custom_accuracy(p, a, tol, min_abs)
    curve, ece = calibration_curve(p, a, n_bins)
    unc = uncertainty_eval(p, variance, a) if variance is not None else None
    return EvalReport(
        mae=reg.mae,
        mse=reg.mse,
        rmse=reg.rmse,
        r2=reg.r2,
        custom_acc_10pct=acc.accuracy,
        accuracy_excluded=acc.n_excluded,
        bin_mae=binwise_mae(p, a, n_bins),
        calibration=curve,
        ece=ece,
        dataset_variant=variant,
        protocol=protocol,
        n=len(a),
        uncertainty=unc,
        model=model,
    )


DELTA_KEYS = ("mae", "mse", "rmse", "r2", "custom_acc_10pct", "ece")


@dataclass
class OodReport:
    reports: dict[str, EvalReport]
    deltas: dict[str, dict[str, float | None]]

    def to_json(self) -> dict:
        return {"reports": {k: r.to_json() for k, r in self.reports.items()}, "deltas": self.deltas}


def _delta(a: float | None, b: float | None) -> float | None:
    return None if a is None or b is None else a - b


def ood_protocol(
    predict_fn: Callable[[object], tuple[np.ndarray, np.ndarray | None] | np.ndarray],
    tests: Mapping[str, tuple[object, np.ndarray]],
    n_bins: int = 10,
    tol: float = 0.10,
    model: str | None = None,
) -> OodReport:
    """Evaluate one clean-trained predictor on each test variant.

    ``tests`` maps clean/noisy/denoised to (model inputs, actuals) with rows
    aligned across variants. ``predict_fn`` returns predictions, or a
    (predictions, variance) pair. Deltas are variant minus clean.
    """
    if set(tests) != set(VARIANTS):
        raise ContractError(f"OOD protocol needs exactly {VARIANTS}, got {sorted(tests)}")
    sizes = {k: len(np.asarray(v[1])) for k, v in tests.items()}
    if len(set(sizes.values())) != 1:
        raise AlignmentError(f"test variants are not row-aligned: {sizes}")
    reports = {}
    for variant in VARIANTS:
        inputs, actual = tests[variant]
        out = predict_fn(inputs)
        pred, var = out if isinstance(out, tuple) else (out, None)
        protocol = "in_distribution" if variant == "clean" else "ood"
        reports[variant] = evaluate(pred, actual, variant, protocol, var, n_bins, tol, model=model)
    clean = reports["clean"]
    deltas = {
        v: {k: _delta(getattr(reports[v], k), getattr(clean, k)) for k in DELTA_KEYS}
        for v in ("noisy", "denoised")
    }
    return OodReport(reports, deltas)


# -- report files ---------------------------------------------------------------


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_calibration_csv(path: str | Path, curve: Sequence[CalibrationBin]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "mean_pred", "mean_actual", "count"])
        for i, c in enumerate(curve):
            w.writerow([i, _num(c.mean_pred), _num(c.mean_actual), c.count])


def write_bin_mae_csv(path: str | Path, bins: Sequence[BinStat]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "bin_lo", "bin_hi", "count", "mae"])
        for i, b in enumerate(bins):
            w.writerow([i, _num(b.bin_lo), _num(b.bin_hi), b.count, _num(b.mae)])


def write_uncertainty_csv(path: str | Path, mean_pred, variance, actual) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "mean", "std", "actual"])
        for i, (m, v, a) in enumerate(zip(np.ravel(mean_pred), np.ravel(variance), np.ravel(actual))):
            w.writerow([i, _num(m), _num(math.sqrt(v)), _num(a)])


COMPARISON_COLUMNS = (
    "model", "variant", "n_test", "mae", "mse", "rmse", "r2", "custom_acc_10pct", "ece",
    "coverage_2sigma", "mean_interval_width", "ood_mae", "ood_rmse", "ood_r2",
)


def comparison_rows(in_dist: Mapping[tuple[str, str], EvalReport], ood: Mapping[str, OodReport]) -> list[dict]:
    """One row per (model, variant). The ood_* columns hold the clean-trained
    model's scores on that variant's test set."""
    rows = []
    for (model, variant), r in sorted(in_dist.items(), key=lambda kv: (kv[0][0], VARIANTS.index(kv[0][1]))):
        o = ood.get(model)
        orep = o.reports[variant] if o is not None else None
        rows.append({
            "model": model,
            "variant": variant,
            "n_test": r.n,
            "mae": r.mae,
            "mse": r.mse,
            "rmse": r.rmse,
            "r2": r.r2,
            "custom_acc_10pct": r.custom_acc_10pct,
            "ece": r.ece,
            "coverage_2sigma": r.uncertainty.coverage_2sigma if r.uncertainty else None,
            "mean_interval_width": r.uncertainty.mean_interval_width if r.uncertainty else None,
            "ood_mae": orep.mae if orep else None,
            "ood_rmse": orep.rmse if orep else None,
            "ood_r2": orep.r2 if orep else None,
        })
    return rows


def write_comparison_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else _num(row[c]) for c in COMPARISON_COLUMNS])
