import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tcm.rng import stream
from tcm.schedules import (ConfigError, RProfile, SamplingError, TimeSampler, delta_t, r_at, sample_lognormal,
                           sample_log_student_t, split_batch)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0021, 80.0), st.floats(0.0, 0.9999))
def test_delta_t_keeps_teacher_above_t_min(t, r):
    dt = delta_t(t, r)
    assert 0 <= dt <= t - 0.002 + 1e-15


def test_delta_t_values():
    # small t: the factor (1 + 8 sigmoid(-t)) is close to 5
    assert delta_t(0.01, 0.999) == pytest.approx((1 + 8 / (1 + math.exp(0.01))) * 0.001 * 0.01)
    # large t: the factor tends to 1
    assert delta_t(80.0, 0.999) == pytest.approx(0.08, rel=1e-12)
    # r = 0 at small t is capped at t - t_min
    assert delta_t(0.5, 0.0) == pytest.approx(0.498)


def test_r_curriculum():
    p = RProfile(base=2, period=25000, cap=0.999)
    assert r_at(1, p) == 0.5
    assert r_at(25000, p) == 0.5
    assert r_at(25001, p) == 0.75
    assert r_at(10 ** 7, p) == 0.999
    assert r_at(5, RProfile(fixed=True, cap=0.99)) == 0.99
    with pytest.raises(ValueError):
        r_at(0, p)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10 ** 6))
def test_r_is_monotone(i):
    p = RProfile(period=2000)
    assert r_at(i, p) <= r_at(i + 1, p) <= p.cap


def test_lognormal_moments():
    t = sample_lognormal(-1.1, 2.0, 200_000, stream(0, "ln"), lo=1e-12, hi=1e12)
    z = np.log(t)
    assert z.mean() == pytest.approx(-1.1, abs=0.02)
    assert z.std() == pytest.approx(2.0, abs=0.02)


def test_lognormal_clamped():
    t = sample_lognormal(-1.1, 2.0, 10_000, stream(0, "ln"), lo=0.004, hi=80.0)
    assert t.min() >= 0.004 and t.max() <= 80.0


def test_student_t_support():
    t = sample_log_student_t(0.0, 0.2, 0.01, 1.0, 5000, stream(0, "st"))
    assert (t > 1.0).all() and (t <= 80.0).all()


def test_student_t_matches_truncated_law():
    # with nu large the law is nearly normal; compare with scipy's truncated Student-t CDF
    mu, sigma, nu, tp = 0.0, 0.5, 5.0, 1.0
    t = sample_log_student_t(mu, sigma, nu, tp, 50_000, stream(1, "st"))
    dist = stats.t(nu, loc=mu, scale=sigma)
    lo, hi = dist.cdf(0.0), dist.cdf(math.log(80.0))
    cdf = lambda z: (dist.cdf(z) - lo) / (hi - lo)
    assert stats.kstest(np.log(t), cdf).pvalue > 1e-3


def test_student_t_heavy_tail_reaches_T():
    t = sample_log_student_t(0.0, 0.2, 0.01, 1.0, 20_000, stream(2, "st"))
    assert np.quantile(t, 0.9) > 10.0  # nu = 0.01 spreads mass far beyond sigma = 0.2


def test_student_t_gives_up():
    with pytest.raises(SamplingError):
        sample_log_student_t(-50.0, 0.01, 100.0, 1.0, 10, stream(0, "st"), max_tries=20)


def test_split_batch():
    assert split_batch(256, 0.25) == (64, 192)
    assert split_batch(7, 0.5) == (3, 4)
    for b, rho in [(1, 0.5), (4, 0.1), (4, 0.0), (4, 1.0)]:
        with pytest.raises(ConfigError):
            split_batch(b, rho)


def test_time_sampler_kinds():
    with pytest.raises(ConfigError):
        TimeSampler("uniform")
    s = TimeSampler("log-student-t", 0.0, 0.2, 0.01, 1.0)
    assert (s.sample(100, stream(0, "ts")) > 1.0).all()
