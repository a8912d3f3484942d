"""Cleaning and feature engineering: KNN imputation, IQR filtering,
Haversine distance, calendar features and train-fitted z-scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Sequence

import numpy as np

from .dataset import ColumnTable
from .errors import (
    DataError,
    DomainError,
    ImputationInfeasibleError,
    QuantileUndefinedError,
    UnknownColumnError,
)

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
COORD_COLUMNS = ("pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude")
ENGINEERED_COLUMNS = ("hour_of_day", "day_of_week", "month", "haversine_km")
ZERO_STD = 1e-12


@dataclass(frozen=True)
class KnnImputeConfig:
    k: int = 5
    donor_cap: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.donor_cap < self.k:
            raise ValueError(f"need k >= 1 and donor_cap >= k, got k={self.k}, donor_cap={self.donor_cap}")


@dataclass(frozen=True)
class SpatialBounds:
    lat_min: float = 40.5
    lat_max: float = 41.0
    lon_min: float = -74.3
    lon_max: float = -73.7

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ValueError("spatial bounds rectangle is degenerate")


@dataclass(frozen=True)
class IqrFilterConfig:
    multiplier: float = 1.5
    spatial_bounds: SpatialBounds = field(default_factory=SpatialBounds)
    min_fare: float = 0.01

    def __post_init__(self):
        if not self.multiplier > 0:
            raise ValueError("IQR multiplier must be positive")


@dataclass(frozen=True)
class EngineeredFeatures:
    hour_of_day: int
    day_of_week: int
    month: int
    haversine_km: float | None = None


@dataclass
class RemovalReport:
    """Rows removed by each criterion.

    A row failing several criteria is attributed to the first one in the
    order iqr, bounds, fare so the counts sum to the total removed.
    """

    iqr_removed: int = 0
    bounds_removed: int = 0
    fare_removed: int = 0
    rows_remaining: int = 0
    iqr_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "iqr_removed": self.iqr_removed,
            "bounds_removed": self.bounds_removed,
            "fare_removed": self.fare_removed,
            "rows_remaining": self.rows_remaining,
        }


@dataclass
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]
    constant: list[str] = field(default_factory=list)

    def as_table_stats(self) -> dict[str, tuple[float, float]]:
        return {c: (self.mean[c], self.std[c]) for c in self.mean}

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "constant": self.constant}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(dict(d["mean"]), dict(d["std"]), list(d.get("constant", [])))


# -- imputation ---------------------------------------------------------------


def _zscore_present(values: np.ndarray, present: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    if present.any():
        v = values[present]
        mu = v.mean()
        sd = v.std()
        out[present] = (v - mu) / sd if sd > 0 else 0.0
    return out


def knn_impute(table: ColumnTable, target_column: str, cfg: KnnImputeConfig = KnnImputeConfig()) -> ColumnTable:
    """Fill missing ``target_column`` entries with the mean target of the k
    nearest donor rows.

    Distances are Euclidean over the other columns, each z-scored over its
    present rows. For a given missing row only the features it has are used,
    and donors must have the target and all of those features present. Ties
    go to the lower row index. When more than ``donor_cap`` donors qualify a
    seeded uniform subset is drawn, one draw per missing row in ascending row
    order.
    """
    if target_column not in table.columns:
        raise UnknownColumnError(f"unknown column '{target_column}'")
    target_mask = table.mask(target_column)
    if not target_mask.any():
        return table

    target = table.column(target_column)
    feat_names = [c for c in table.column_names if c != target_column]
    feats = np.column_stack([_zscore_present(table.column(c), ~table.mask(c)) for c in feat_names]) if feat_names else np.empty((table.n_rows, 0))
    feat_present = np.column_stack([~table.mask(c) for c in feat_names]) if feat_names else np.empty((table.n_rows, 0), dtype=bool)
    has_target = ~target_mask

    rng = np.random.default_rng(cfg.seed)
    filled = target.copy()
    for row in np.flatnonzero(target_mask):
        use = np.flatnonzero(feat_present[row])
        donors = np.flatnonzero(has_target & feat_present[:, use].all(axis=1)) if len(use) else np.flatnonzero(has_target)
        if len(donors) < cfg.k:
            raise ImputationInfeasibleError(
                f"row {row}: only {len(donors)} donors for '{target_column}', need k={cfg.k}"
            )
        if len(donors) > cfg.donor_cap:
            donors = np.sort(rng.choice(donors, size=cfg.donor_cap, replace=False))
        d2 = np.zeros(len(donors))
        for j in use:
            d2 += (feats[donors, j] - feats[row, j]) ** 2
        dist = np.sqrt(d2)
        order = np.lexsort((donors, dist))[: cfg.k]
        filled[row] = target[donors[order]].mean()

    return table.with_column(target_column, filled, np.zeros(table.n_rows, dtype=bool))


# -- outlier filtering --------------------------------------------------------


def quantile_type7(values: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile (Hyndman & Fan type 7)."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise QuantileUndefinedError("quantile of an empty sample")
    h = (n - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def iqr_bounds(values: np.ndarray, multiplier: float) -> tuple[float, float]:
    if len(values) < 4:
        raise QuantileUndefinedError(f"IQR needs at least 4 values, got {len(values)}")
    q1 = quantile_type7(values, 0.25)
    q3 = quantile_type7(values, 0.75)
    iqr = q3 - q1
    return q1 - multiplier * iqr, q3 + multiplier * iqr


def iqr_filter(
    table: ColumnTable,
    columns: Sequence[str],
    cfg: IqrFilterConfig = IqrFilterConfig(),
) -> tuple[ColumnTable, RemovalReport]:
    report = RemovalReport()
    n = table.n_rows

    iqr_bad = np.zeros(n, dtype=bool)
    for c in columns:
        v = table.column(c)
        if table.mask(c).any():
            raise DataError(f"column '{c}' has missing values; impute before filtering")
        lo, hi = iqr_bounds(v, cfg.multiplier)
        report.iqr_bounds[c] = (lo, hi)
        iqr_bad |= (v < lo) | (v > hi)

    b = cfg.spatial_bounds
    bounds_bad = np.zeros(n, dtype=bool)
    for c in COORD_COLUMNS:
        if c not in table.columns:
            continue
        v = table.column(c)
        lo, hi = (b.lat_min, b.lat_max) if c.endswith("latitude") else (b.lon_min, b.lon_max)
        bounds_bad |= (v < lo) | (v > hi)

    fare_bad = np.zeros(n, dtype=bool)
    if "fare_amount" in table.columns:
        fare_bad = table.column("fare_amount") < cfg.min_fare

    report.iqr_removed = int(iqr_bad.sum())
    report.bounds_removed = int((bounds_bad & ~iqr_bad).sum())
    report.fare_removed = int((fare_bad & ~iqr_bad & ~bounds_bad).sum())
    keep = ~(iqr_bad | bounds_bad | fare_bad)
    report.rows_remaining = int(keep.sum())
    return table.take(np.flatnonzero(keep)), report


# -- features -----------------------------------------------------------------


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in km on a sphere of radius 6371.0088 km."""
    for v in (lat1, lon1, lat2, lon2):
        if not math.isfinite(v):
            raise DomainError(f"non-finite coordinate {v}")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def haversine_km_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    lat1, lon1, lat2, lon2 = (np.asarray(v, dtype=np.float64) for v in (lat1, lon1, lat2, lon2))
    if not all(np.isfinite(v).all() for v in (lat1, lon1, lat2, lon2)):
        raise DomainError("non-finite coordinate in haversine input")
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = np.radians(lat2 - lat1)
    dlmb = np.radians(lon2 - lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def extract_temporal(ts: datetime) -> EngineeredFeatures:
    return EngineeredFeatures(hour_of_day=ts.hour, day_of_week=ts.weekday(), month=ts.month)


def temporal_arrays(epoch_seconds: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised hour, weekday (Monday=0) and month from UTC epoch seconds."""
    t = np.asarray(epoch_seconds, dtype=np.float64).astype(np.int64)
    days = np.floor_divide(t, 86_400)
    hour = np.floor_divide(t - days * 86_400, 3600)
    dow = (days + 3) % 7  # 1970-01-01 was a Thursday
    month = t.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12 + 1
    return hour.astype(np.float64), dow.astype(np.float64), month.astype(np.float64)


def engineer_features(table: ColumnTable) -> ColumnTable:
    """Append hour_of_day, day_of_week, month and haversine_km."""
    hour, dow, month = temporal_arrays(table.column("pickup_datetime"))
    dist = haversine_km_array(
        table.column("pickup_latitude"),
        table.column("pickup_longitude"),
        table.column("dropoff_latitude"),
        table.column("dropoff_longitude"),
    )
    out = table
    for name, vals in zip(ENGINEERED_COLUMNS, (hour, dow, month, dist)):
        out = out.with_column(name, vals)
    return out


# -- normalization ------------------------------------------------------------


def fit_normalizer(table: ColumnTable, train_rows: Sequence[int] | np.ndarray, columns: Sequence[str] | None = None) -> NormStats:
    """Population mean/std per column over training rows only."""
    train_rows = np.asarray(train_rows)
    if len(train_rows) == 0:
        raise DataError("cannot fit a normalizer on zero training rows")
    columns = table.column_names if columns is None else columns
    mean, std, const = {}, {}, []
    for c in columns:
        v = table.column(c)[train_rows]
        mean[c] = float(v.mean())
        std[c] = float(v.std())
        if std[c] < ZERO_STD:
            const.append(c)
            log.warning("column %s is constant on training rows; left unscaled", c)
    return NormStats(mean, std, const)


def apply_normalizer(table: ColumnTable, stats: NormStats) -> ColumnTable:
    out = table
    for c, mu in stats.mean.items():
        if c in stats.constant or c not in table.columns:
            continue
        out = out.with_column(c, (table.column(c) - mu) / stats.std[c], table.mask(c))
    return replace(out, norm_stats=stats.as_table_stats())


def denormalize(table: ColumnTable, stats: NormStats) -> ColumnTable:
    out = table
    for c, mu in stats.mean.items():
        if c in stats.constant or c not in table.columns:
            continue
        out = out.with_column(c, table.column(c) * stats.std[c] + mu, table.mask(c))
    return replace(out, norm_stats=None)
