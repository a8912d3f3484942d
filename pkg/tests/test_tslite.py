from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farebench import autodiff as ad
from farebench.dataset import ColumnTable
from farebench.errors import ContractError, InsufficientDataError, ShapeError
from farebench.tslite import (
    TSLITE_ADAMW,
    TSLITE_TRAIN,
    FoldTransform,
    TimesBlockLite,
    TsLiteModel,
    dominant_period,
    fit_tslite,
    fold,
    make_windows,
    predict,
    unfold,
    window_periods,
)


def series(values, other=None):
    n = len(values)
    cols = {"pickup_datetime": np.arange(n, dtype=float), "fare_amount": np.asarray(values, float)}
    cols["other"] = np.arange(n, dtype=float) * 10 if other is None else other
    return ColumnTable.from_arrays(cols)


def test_window_counts():
    w = make_windows(series(np.arange(12.0)), ["other"])
    assert len(w) == 2 and list(w.targets) == [10.0, 11.0] and list(w.end_rows) == [10, 11]
    assert len(make_windows(series(np.arange(11.0)), ["other"])) == 1


def test_window_contents_match_slices():
    fare = np.arange(12.0) ** 2
    t = series(fare)
    w = make_windows(t, ["fare_amount", "other"])
    x = t.matrix(["fare_amount", "other"])
    for i in range(len(w)):
        assert np.array_equal(w.windows[i], x[i:i + 10])
        assert w.targets[i] == fare[i + 10]


def test_window_errors():
    with pytest.raises(InsufficientDataError):
        make_windows(series(np.arange(10.0)), ["other"])
    t = series(np.arange(12.0)).with_column("pickup_datetime", np.arange(12.0)[::-1])
    with pytest.raises(ContractError):
        make_windows(t, ["other"])


def sine(period, n=10, phase=0.0):
    return np.sin(2 * np.pi * np.arange(n) / period + phase)


def dft_amplitudes(x):
    """Direct DFT sums for frequencies 1..T/2."""
    T = len(x)
    out = []
    for f in range(1, T // 2 + 1):
        re = sum(x[t] * np.cos(2 * np.pi * f * t / T) for t in range(T))
        im = sum(x[t] * np.sin(2 * np.pi * f * t / T) for t in range(T))
        out.append(np.hypot(re, im))
    return np.array(out)


def period_oracle(x):
    amp = dft_amplitudes(x)
    if amp.max() <= 1e-10 * np.abs(x).sum():
        return 5
    f = int(np.argmax(amp)) + 1
    return int(np.floor(10 / f + 0.5))


def test_period_examples():
    assert dominant_period(sine(5)) == 5
    assert dominant_period(np.full(10, 3.7)) == 5
    assert dominant_period(np.zeros(10)) == 5
    assert [dominant_period(sine(p)) for p in (2, 10)] == [2, 10]


def test_period_matches_dft_oracle_on_mixed_sines():
    rng = np.random.default_rng(0)
    for _ in range(100):
        f1, f2 = rng.integers(1, 6, size=2)
        x = rng.uniform(0.2, 2) * sine(10 / f1, phase=rng.uniform(0, 6)) + rng.uniform(0.2, 2) * sine(10 / f2, phase=rng.uniform(0, 6))
        assert dominant_period(x) == period_oracle(x)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_period_scale_invariant(seed, c):
    x = np.random.default_rng(seed).normal(size=(10, 3))
    assert dominant_period(c * x) == dominant_period(x)


def test_vectorised_periods_match_scalar():
    h = np.random.default_rng(1).normal(size=(40 * 10, 4))
    want = [dominant_period(h[i * 10:(i + 1) * 10]) for i in range(40)]
    assert list(window_periods(h)) == want


@pytest.mark.parametrize("p", range(2, 11))
def test_fold_unfold_roundtrip(p):
    x = np.random.default_rng(p).normal(size=(10, 3))
    grid = fold(x, p)
    assert grid.shape == (-(-10 // p), p, 3)
    assert np.array_equal(unfold(grid, 10), x)


@pytest.mark.parametrize("p", range(2, 11))
def test_identity_fold_transform_is_identity_before_tanh(p):
    ft = FoldTransform(p, np.random.default_rng(0))
    ft.w_seg.value[...] = np.eye(ft.s)
    ft.w_per.value[...] = np.eye(p)
    h = np.random.default_rng(1).uniform(-0.5, 0.5, size=(3 * 10, 4))
    out = ft(ad.constant(h), 3).value
    assert np.allclose(np.arctanh(out), h, rtol=0, atol=1e-12)


@pytest.mark.parametrize("p", range(2, 11))
def test_block_preserves_shape(p):
    block = TimesBlockLite(6, 0.3, np.random.default_rng(0))
    h = ad.constant(np.random.default_rng(1).normal(size=(4 * 10, 6)))
    out = block(h, periods=np.full(4, p))
    assert out.shape == h.shape


def test_zero_head_gives_bias():
    model = TsLiteModel(2, seed=0)
    model.head.weight.value[...] = 0.0
    model.head.bias.value[...] = 1.25
    x = np.random.default_rng(0).normal(size=(5, 10, 2))
    assert np.all(predict(model, x) == 1.25)


def test_eval_determinism():
    model = TsLiteModel(2, seed=3)
    x = np.random.default_rng(0).normal(size=(6, 10, 2))
    assert np.array_equal(predict(model, x), predict(model, x))


def test_three_window_gradient():
    rng = np.random.default_rng(4)
    model = TsLiteModel(2, d_model=4, seed=2)
    x = rng.normal(size=(3, 10, 2))
    y = rng.normal(size=(3, 1))
    res = ad.grad_check(lambda: ad.mse(model.forward(x), ad.constant(y)), model.parameters())
    assert res.passed, res
    res = ad.grad_check(lambda: ad.mse(model.forward(x, train=True, rng=5), ad.constant(y)), model.parameters())
    assert res.passed, res


def test_shape_checked():
    with pytest.raises(ShapeError):
        TsLiteModel(2).forward(np.zeros((3, 9, 2)))


def chrono_split(w, frac=0.9):
    cut = int(len(w) * frac)
    return w.subset(np.arange(cut)), w.subset(np.arange(cut, len(w)))


def test_constant_series():
    rng = np.random.default_rng(0)
    w = make_windows(series(np.full(1010, 1.0), rng.normal(size=1010)), ["fare_amount", "other"])
    tr, va = chrono_split(w)
    model = fit_tslite(tr, va, replace(TSLITE_TRAIN, max_epochs=30), replace(TSLITE_ADAMW, learning_rate=5e-3))
    assert min(r.val_loss for r in model.history) < 1e-3


def test_periodic_series():
    rng = np.random.default_rng(0)
    t = np.arange(5010)
    fare = (1 + 0.5 * np.sin(2 * np.pi * t / 700)) * np.sin(2 * np.pi * t / 5) + 0.1 * rng.normal(size=len(t))
    w = make_windows(series(fare, rng.normal(size=len(t))), ["fare_amount", "other"])
    assert len(w) == 5000
    tr, va = chrono_split(w)
    model = fit_tslite(tr, va, replace(TSLITE_TRAIN, max_epochs=12))
    p = predict(model, va)
    r2 = 1 - np.sum((p - va.targets) ** 2) / np.sum((va.targets - va.targets.mean()) ** 2)
    assert r2 >= 0.7


def test_early_stop_patience_seven():
    assert TSLITE_TRAIN.patience == 7
    rng = np.random.default_rng(1)
    w = make_windows(series(rng.normal(size=400), rng.normal(size=400)), ["other"])
    tr, va = chrono_split(w)
    model = fit_tslite(tr, va, replace(TSLITE_TRAIN, max_epochs=60), replace(TSLITE_ADAMW, learning_rate=1e-2))
    hist = model.history
    best = int(np.argmin([r.val_loss for r in hist])) + 1
    assert len(hist) < 60 and len(hist) - best == 7
