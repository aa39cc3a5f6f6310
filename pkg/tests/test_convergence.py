import numpy as np
import pytest
from hypothesis import given, strategies as st

from segnlme.convergence import (
    check_due, first_stationary_batch, geweke_z, stationarity_check,
)
from segnlme.errors import InputError


def test_constant_series_z_zero():
    assert geweke_z(np.full(300, 4.2)) == 0.0


def test_ramp_has_large_z():
    assert abs(geweke_z(np.arange(1, 301, dtype=float))) > 10


def test_z_formula_by_hand():
    rng = np.random.default_rng(0)
    x = rng.normal(size=100)
    f, l = x[:10], x[50:]
    ref = (f.mean() - l.mean()) / np.sqrt(f.var(ddof=1) / 10 + l.var(ddof=1) / 50)
    assert geweke_z(x) == pytest.approx(ref, rel=1e-13)


def test_iid_noise_calibration():
    rng = np.random.default_rng(12345)
    z = np.array([geweke_z(rng.normal(size=300)) for _ in range(1000)])
    assert np.mean(np.abs(z) < 3) >= 0.99


def test_short_series_rejected():
    with pytest.raises(InputError):
        geweke_z(np.zeros(19))
    with pytest.raises(InputError):
        geweke_z(np.zeros(50), frac_first=0.6, frac_last=0.5)


@given(seed=st.integers(0, 10_000), c=st.floats(-1e3, 1e3))
def test_z_shift_invariant_and_sign_equivariant(seed, c):
    x = np.random.default_rng(seed).normal(size=60)
    z = geweke_z(x)
    assert geweke_z(x + c) == pytest.approx(z, rel=1e-6, abs=1e-6)
    assert geweke_z(-x) == pytest.approx(-z, rel=1e-12, abs=1e-12)


def test_all_constant_window_stationary():
    rep = stationarity_check(np.full((300, 19), 1.0), 300, 0, 10, 1.5)
    assert rep.statistic == 0.0 and rep.stationary
    assert rep.threshold == pytest.approx(1.5 * 19)


def test_threshold_arithmetic_single_coordinate():
    # build a chain whose window z is exactly 1.3 after rescaling the head
    rng = np.random.default_rng(1)
    x = rng.normal(size=100)
    z0 = geweke_z(x)
    # shifting the first 10 values moves the head mean linearly
    f, l = x[:10], x[50:]
    scale = np.sqrt(f.var(ddof=1) / 10 + l.var(ddof=1) / 50)
    y = x.copy()
    y[:10] += (1.3 - z0) * scale
    rep = stationarity_check(y[:, None], 100, 0, 10, 1.5)
    assert rep.z[0] == pytest.approx(1.3, rel=1e-12)
    assert rep.statistic == pytest.approx(1.69, rel=1e-12)
    assert not rep.stationary


def test_window_out_of_range():
    with pytest.raises(InputError):
        stationarity_check(np.zeros((100, 2)), 50, 6, 10, 1.5)
    with pytest.raises(InputError):
        stationarity_check(np.zeros((100, 2)), 10, 0, 10, 1.5)
    with pytest.raises(InputError):
        stationarity_check(np.zeros((100, 2)), 50, 0, 10, 0.0)


def test_constant_chain_stationary_at_first_check():
    chain = np.full((400, 19), 0.7)
    rep = first_stationary_batch(chain, 300, 10, 1.5)
    assert rep is not None and rep.batch_index == 0


def test_trend_then_noise():
    rng = np.random.default_rng(7)
    P, trend = 3, 500
    ramp = np.linspace(-10.0, 0.0, trend)[:, None] * np.ones(P)
    noise = rng.normal(size=(1500, P))
    chain = np.vstack([ramp + rng.normal(scale=0.1, size=(trend, P)), noise])
    M, w = 300, 10
    rep = first_stationary_batch(chain, M, w, 1.5)
    assert rep is not None
    # the accepted window starts at w*B, after the trend has ended
    assert w * rep.batch_index >= trend
    # and every window still overlapping the trend was rejected
    for B in range(0, trend // w):
        assert not stationarity_check(chain, M, B, w, 1.5).stationary


@given(seed=st.integers(0, 1000), eps=st.floats(0.1, 5.0), bump=st.floats(0.0, 3.0))
def test_stationarity_monotone_in_epsilon(seed, eps, bump):
    chain = np.random.default_rng(seed).normal(size=(60, 4))
    r1 = stationarity_check(chain, 60, 0, 10, eps)
    r2 = stationarity_check(chain, 60, 0, 10, eps + bump + 1e-9)
    if r1.stationary:
        assert r2.stationary


def test_check_due_schedule():
    assert check_due(299, 300, 10) is None
    assert check_due(300, 300, 10) == 0
    assert check_due(305, 300, 10) is None
    assert check_due(310, 300, 10) == 1


def test_report_dict_names():
    rep = stationarity_check(np.zeros((30, 2)), 30, 0, 10, 1.5, names=("x", "y"))
    d = rep.to_dict()
    assert d["z"] == {"x": 0.0, "y": 0.0} and d["stationary"] is True
