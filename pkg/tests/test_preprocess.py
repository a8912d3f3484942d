from __future__ import annotations

import math
from datetime import datetime, timezone
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farebench.dataset import ColumnTable
from farebench.errors import DataError, DomainError, ImputationInfeasibleError, QuantileUndefinedError, UnknownColumnError
from farebench.preprocess import (
    EARTH_RADIUS_KM,
    IqrFilterConfig,
    KnnImputeConfig,
    SpatialBounds,
    apply_normalizer,
    denormalize,
    engineer_features,
    extract_temporal,
    fit_normalizer,
    haversine_km,
    haversine_km_array,
    iqr_bounds,
    iqr_filter,
    knn_impute,
    quantile_type7,
    temporal_arrays,
)

# -- KNN imputation -----------------------------------------------------------


def knn_oracle(data: dict[str, np.ndarray], masks: dict[str, np.ndarray], target: str, k: int) -> np.ndarray:
    """Exhaustive all-pairs version: z-score each feature over present rows,
    sort every candidate donor by (distance, row index)."""
    names = [c for c in data if c != target]
    z = {}
    for c in names:
        present = ~masks[c]
        vals = data[c][present]
        mu, sd = vals.mean(), vals.std()
        col = np.zeros(len(data[c]))
        col[present] = (vals - mu) / sd if sd > 0 else 0.0
        z[c] = col
    out = data[target].copy()
    n = len(out)
    for i in range(n):
        if not masks[target][i]:
            continue
        use = [c for c in names if not masks[c][i]]
        cands = []
        for j in range(n):
            if masks[target][j] or any(masks[c][j] for c in use):
                continue
            d2 = 0.0
            for c in use:
                d2 += (z[c][j] - z[c][i]) ** 2
            cands.append((math.sqrt(d2), j))
        cands.sort()
        out[i] = np.mean(data[target][[j for _, j in cands[:k]]])
    return out


def test_knn_spec_example():
    t = ColumnTable.from_arrays({"x": [0, 1, 2, 10], "y": [10, 20, 30, np.nan]})
    out = knn_impute(t, "y", KnnImputeConfig(k=2))
    assert out.column("y")[3] == 25.0
    assert not out.mask("y").any()


def test_knn_no_missing_is_identity():
    t = ColumnTable.from_arrays({"x": [0.0, 1.0, 2.0], "y": [1.0, 2.0, 3.0]})
    assert knn_impute(t, "y", KnnImputeConfig(k=1)) is t


def test_knn_duplicate_donor():
    t = ColumnTable.from_arrays({"x": [0.0, 5.0, 9.0, 5.0], "z": [1.0, 2.0, 3.0, 2.0], "y": [1.0, 7.0, 3.0, np.nan]})
    assert knn_impute(t, "y", KnnImputeConfig(k=1)).column("y")[3] == 7.0


def test_knn_errors():
    t = ColumnTable.from_arrays({"x": [0.0, 1.0, 2.0], "y": [1.0, np.nan, np.nan]})
    with pytest.raises(ImputationInfeasibleError):
        knn_impute(t, "y", KnnImputeConfig(k=2))
    with pytest.raises(UnknownColumnError):
        knn_impute(t, "nope", KnnImputeConfig(k=1))


def test_knn_leaves_other_columns():
    rng = np.random.default_rng(0)
    data = {"a": rng.normal(size=30), "b": rng.normal(size=30), "y": rng.normal(size=30)}
    data["y"][[3, 7]] = np.nan
    t = ColumnTable.from_arrays(data)
    out = knn_impute(t, "y", KnnImputeConfig(k=3))
    for c in ("a", "b"):
        assert np.array_equal(out.column(c), t.column(c))


def test_knn_matches_bruteforce_oracle_100_instances():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = int(rng.integers(8, 60))
        n_feat = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        data = {f"f{j}": np.round(rng.normal(size=n), int(rng.integers(0, 3))) for j in range(n_feat)}
        data["y"] = rng.normal(10, 3, size=n)
        masks = {c: np.zeros(n, bool) for c in data}
        masks["y"] = rng.random(n) < 0.2
        masks["y"][:k + 2] = False
        for j in range(n_feat):
            masks[f"f{j}"] = rng.random(n) < 0.1
            masks[f"f{j}"][:k + 2] = False
        for c in data:
            data[c][masks[c]] = np.nan
        t = ColumnTable.from_arrays(data, masks)
        got = knn_impute(t, "y", KnnImputeConfig(k=k, donor_cap=10_000)).column("y")
        want = knn_oracle(data, masks, "y", k)
        assert np.array_equal(got, want), trial


def test_knn_oracle_on_1000_rows():
    rng = np.random.default_rng(7)
    n = 1000
    data = {"a": rng.normal(size=n), "b": rng.integers(0, 5, n).astype(float), "y": rng.normal(size=n)}
    masks = {"a": np.zeros(n, bool), "b": np.zeros(n, bool), "y": rng.random(n) < 0.02}
    data["y"][masks["y"]] = np.nan
    t = ColumnTable.from_arrays(data, masks)
    got = knn_impute(t, "y", KnnImputeConfig(k=5)).column("y")
    assert np.array_equal(got, knn_oracle(data, masks, "y", 5))


def test_knn_donor_cap_is_seeded():
    rng = np.random.default_rng(1)
    data = {"a": rng.normal(size=200), "y": rng.normal(size=200)}
    data["y"][[5, 50]] = np.nan
    t = ColumnTable.from_arrays(data)
    cfg = KnnImputeConfig(k=3, donor_cap=20, seed=9)
    assert np.array_equal(knn_impute(t, "y", cfg).column("y"), knn_impute(t, "y", cfg).column("y"))


# -- IQR filtering ------------------------------------------------------------


def test_quantile_spec_example():
    v = np.array([1, 2, 3, 4, 100.0])
    assert quantile_type7(v, 0.25) == 2.0 and quantile_type7(v, 0.75) == 4.0
    assert iqr_bounds(v, 1.5) == (-1.0, 7.0)
    t = ColumnTable.from_arrays({"fare_amount": v})
    out, rep = iqr_filter(t, ["fare_amount"], IqrFilterConfig())
    assert list(out.column("fare_amount")) == [1, 2, 3, 4]
    assert rep.iqr_removed == 1 and rep.rows_remaining == 4


def test_iqr_bounds_match_numpy_oracle_100_instances():
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = rng.standard_t(3, size=int(rng.integers(4, 200)))
        m = float(rng.uniform(0.5, 3))
        q1, q3 = np.percentile(v, [25, 75], method="linear")
        lo, hi = iqr_bounds(v, m)
        assert abs(lo - (q1 - m * (q3 - q1))) <= 1e-9
        assert abs(hi - (q3 + m * (q3 - q1))) <= 1e-9
        t = ColumnTable.from_arrays({"v": v})
        out, _ = iqr_filter(t, ["v"], IqrFilterConfig(multiplier=m))
        kept = v[(v >= lo) & (v <= hi)]
        assert np.array_equal(out.column("v"), kept)


def test_iqr_identical_values_no_removal():
    t = ColumnTable.from_arrays({"fare_amount": [5.0] * 8})
    out, rep = iqr_filter(t, ["fare_amount"])
    assert out.n_rows == 8 and rep.iqr_removed == 0


def test_iqr_needs_four_values():
    with pytest.raises(QuantileUndefinedError):
        iqr_filter(ColumnTable.from_arrays({"v": [1.0, 2.0, 3.0]}), ["v"])


def test_iqr_rejects_missing():
    with pytest.raises(DataError):
        iqr_filter(ColumnTable.from_arrays({"v": [1.0, 2.0, np.nan, 4.0]}), ["v"])


def nyc_table(lat, fare):
    n = len(lat)
    return ColumnTable.from_arrays({
        "pickup_longitude": [-73.98] * n, "pickup_latitude": lat,
        "dropoff_longitude": [-73.95] * n, "dropoff_latitude": [40.77] * n,
        "fare_amount": fare,
    })


def test_bounds_and_fare_criteria():
    t = nyc_table([40.7, 39.0, 40.8, 40.75, 40.6], [10.0, 10.0, 0.0, 12.0, 11.0])
    out, rep = iqr_filter(t, [], IqrFilterConfig())
    assert rep.bounds_removed == 1 and rep.fare_removed == 1 and rep.rows_remaining == 3
    assert rep.to_json() == {"iqr_removed": 0, "bounds_removed": 1, "fare_removed": 1, "rows_remaining": 3}
    again, rep2 = iqr_filter(out, [], IqrFilterConfig())
    assert again.n_rows == out.n_rows and rep2.bounds_removed == 0 and rep2.fare_removed == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(40.3, 41.2), st.floats(-1, 30)), min_size=1, max_size=40))
def test_bounds_fare_filter_idempotent(rows):
    t = nyc_table([r[0] for r in rows], [r[1] for r in rows])
    out, _ = iqr_filter(t, [], IqrFilterConfig())
    if out.n_rows:
        again, rep = iqr_filter(out, [], IqrFilterConfig())
        assert rep.bounds_removed == 0 and rep.fare_removed == 0 and again.n_rows == out.n_rows


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        SpatialBounds(lat_min=41.0, lat_max=40.0)
    with pytest.raises(ValueError):
        IqrFilterConfig(multiplier=0.0)


# -- haversine ----------------------------------------------------------------


def haversine_decimal(lat1, lon1, lat2, lon2) -> float:
    """Same formula evaluated at 40 significant digits."""
    getcontext().prec = 40
    pi = Decimal("3.141592653589793238462643383279502884197")

    def rad(d):
        return Decimal(repr(d)) * pi / 180

    def sin(x):
        x = x % (2 * pi)
        term, total, i = x, x, 1
        while abs(term) > Decimal(10) ** -38:
            term = -term * x * x / ((2 * i) * (2 * i + 1))
            total += term
            i += 1
        return total

    def cos(x):
        return sin(x + pi / 2)

    def asin(y):
        # Newton on sin(x) = y
        x = Decimal(math.asin(float(y)))
        for _ in range(6):
            x -= (sin(x) - y) / cos(x)
        return x

    p1, p2 = rad(lat1), rad(lat2)
    a = sin((p2 - p1) / 2) ** 2 + cos(p1) * cos(p2) * sin((rad(lon2) - rad(lon1)) / 2) ** 2
    return float(2 * Decimal(repr(EARTH_RADIUS_KM)) * asin(min(Decimal(1), a.sqrt())))


def test_haversine_examples():
    assert haversine_km(40.7, -73.9, 40.7, -73.9) == 0.0
    # antipodal equator points are exactly half a great circle
    assert abs(haversine_km(0, 0, 0, 180) - 20015.114) <= 1e-3
    assert abs(haversine_km(0, 0, 0, 180) - math.pi * EARTH_RADIUS_KM) <= 1e-9
    want = haversine_decimal(40.7128, -74.0060, 40.7580, -73.9855)
    assert abs(haversine_km(40.7128, -74.0060, 40.7580, -73.9855) - want) <= 1e-9 * want


def test_haversine_domain_error():
    with pytest.raises(DomainError):
        haversine_km(float("nan"), 0, 0, 0)
    with pytest.raises(DomainError):
        haversine_km_array([np.inf], [0], [0], [0])


def random_coords(rng, n):
    return rng.uniform(-90, 90, n), rng.uniform(-180, 180, n)


def test_haversine_symmetry_10k():
    rng = np.random.default_rng(3)
    la1, lo1 = random_coords(rng, 10_000)
    la2, lo2 = random_coords(rng, 10_000)
    assert np.array_equal(haversine_km_array(la1, lo1, la2, lo2), haversine_km_array(la2, lo2, la1, lo1))


def test_haversine_triangle_inequality_1k():
    rng = np.random.default_rng(4)
    a, b, c = (random_coords(rng, 1000) for _ in range(3))
    ab = haversine_km_array(a[0], a[1], b[0], b[1])
    bc = haversine_km_array(b[0], b[1], c[0], c[1])
    ac = haversine_km_array(a[0], a[1], c[0], c[1])
    assert np.all(ac <= ab + bc + 1e-6)


def test_haversine_array_matches_scalar():
    rng = np.random.default_rng(8)
    la1, lo1 = random_coords(rng, 50)
    la2, lo2 = random_coords(rng, 50)
    arr = haversine_km_array(la1, lo1, la2, lo2)
    for i in range(50):
        assert arr[i] == pytest.approx(haversine_km(la1[i], lo1[i], la2[i], lo2[i]), rel=1e-12)


# -- temporal features --------------------------------------------------------


def ts(text):
    return datetime.strptime(text, "%Y-%m-%d %H:%M:%S").replace(tzinfo=timezone.utc)


def test_temporal_examples():
    f = extract_temporal(ts("2015-03-15 17:42:00"))
    assert (f.hour_of_day, f.month) == (17, 3)
    assert extract_temporal(ts("2024-01-01 00:00:00")).day_of_week == 0
    f = extract_temporal(ts("2015-12-31 23:59:59"))
    assert (f.hour_of_day, f.month) == (23, 12)


@settings(max_examples=300, deadline=None)
@given(st.datetimes(min_value=datetime(1971, 1, 1), max_value=datetime(2037, 12, 31)))
def test_temporal_arrays_match_calendar(dt):
    dt = dt.replace(microsecond=0, tzinfo=timezone.utc)
    hour, dow, month = temporal_arrays(np.array([dt.timestamp()]))
    assert (hour[0], dow[0], month[0]) == (dt.hour, dt.weekday(), dt.month)


def test_engineer_features_haversine_zero_iff_same_point():
    t = ColumnTable.from_arrays({
        "pickup_datetime": [ts("2015-03-02 08:00:00").timestamp()] * 2,
        "pickup_longitude": [-73.98, -73.98], "pickup_latitude": [40.75, 40.75],
        "dropoff_longitude": [-73.98, -73.90], "dropoff_latitude": [40.75, 40.80],
    })
    out = engineer_features(t)
    d = out.column("haversine_km")
    assert d[0] == 0.0 and d[1] > 0
    assert out.column("day_of_week")[0] == 0 and out.column("hour_of_day")[0] == 8


# -- normalization ------------------------------------------------------------


def test_normalizer_train_stats():
    rng = np.random.default_rng(0)
    t = ColumnTable.from_arrays({"a": rng.normal(3, 2, 100), "c": np.full(100, 4.0)})
    train = np.arange(80)
    stats = fit_normalizer(t, train)
    assert stats.constant == ["c"]
    z = apply_normalizer(t, stats)
    assert np.array_equal(z.column("c"), t.column("c"))
    a = z.column("a")[train]
    assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9


def test_test_rows_use_train_stats():
    rng = np.random.default_rng(1)
    t = ColumnTable.from_arrays({"a": np.concatenate([rng.normal(0, 1, 80), rng.normal(5, 3, 20)])})
    stats = fit_normalizer(t, np.arange(80))
    got = apply_normalizer(t, stats).column("a")[80:]
    raw = t.column("a")[80:]
    assert np.allclose(got, (raw - stats.mean["a"]) / stats.std["a"], rtol=0, atol=1e-12)
    assert not np.allclose(got, (raw - raw.mean()) / raw.std())


def test_normalizer_empty_train():
    with pytest.raises(DataError):
        fit_normalizer(ColumnTable.from_arrays({"a": [1.0, 2.0]}), [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=3, max_size=50))
def test_normalize_roundtrip(values):
    t = ColumnTable.from_arrays({"a": values})
    stats = fit_normalizer(t, np.arange(len(values)))
    back = denormalize(apply_normalizer(t, stats), stats).column("a")
    if "a" in stats.constant:
        assert np.array_equal(back, t.column("a"))
    else:
        scale = max(1.0, float(np.max(np.abs(values))))
        assert np.allclose(back, t.column("a"), rtol=1e-9, atol=1e-9 * scale)
