"""Time gaps, the r curriculum and the time-sampling distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .oracle import T_MAX, T_MIN


class SamplingError(RuntimeError):
    """Rejection sampling ran out of retries."""


class ConfigError(ValueError):
    pass


def delta_t(t, r: float, t_min: float = T_MIN):
    """Adjacent-time gap ``(1 + 8 sigmoid(-t)) (1 - r) t``, capped so ``t - dt >= t_min``."""
    t = np.asarray(t, dtype=np.float64)
    raw = (1.0 + 8.0 * expit(-t)) * (1.0 - r) * t
    return np.minimum(raw, t - t_min)


@dataclass(frozen=True)
class RProfile:
    """``r_i = min(1 - 1/base^ceil(i/period), cap)``; a fixed profile always returns ``cap``."""

    base: float = 2.0
    period: int = 25000
    cap: float = 0.999
    fixed: bool = False

    def __call__(self, iteration: int) -> float:
        return r_at(iteration, self)


def r_at(iteration: int, profile: RProfile = RProfile()) -> float:
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    if profile.fixed:
        return profile.cap
    k = math.ceil(iteration / profile.period)
    return min(1.0 - profile.base ** (-k), profile.cap)


def sample_lognormal(mu: float, sigma: float, n: int, rng: np.random.Generator,
                     lo: float = T_MIN, hi: float = T_MAX) -> np.ndarray:
    """``exp(mu + sigma z)`` clamped into ``[lo, hi]``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    z = rng.standard_normal(n)
    return np.clip(np.exp(mu + sigma * z), lo, hi)


def sample_log_student_t(mu: float, sigma: float, nu: float, t_prime: float, n: int,
                         rng: np.random.Generator, T: float = T_MAX, max_tries: int = 10_000) -> np.ndarray:
    """Times with ``ln t ~ mu + sigma * StudentT(nu)`` truncated to ``(ln t', ln T]``.

    Exact rejection against the untruncated law.  Each sample gets at most
    ``max_tries`` proposals.
    """
    if sigma <= 0 or nu <= 0:
        raise ValueError("sigma and nu must be positive")
    if not 0 < t_prime < T:
        raise ValueError(f"need 0 < t' < T, got t'={t_prime}, T={T}")
    lo, hi = math.log(t_prime), math.log(T)
    out = np.empty(n)
    filled = 0
    tries = 0
    while filled < n:
        if tries >= max_tries:
            raise SamplingError(
                f"log-Student-t(mu={mu}, sigma={sigma}, nu={nu}) truncated to ({t_prime}, {T}] "
                f"accepted {filled}/{n} samples after {max_tries} proposals each")
        need = n - filled
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            z = mu + sigma * rng.standard_t(nu, size=need)
        ok = z[(z > lo) & (z <= hi)]
        out[filled:filled + ok.size] = np.exp(ok)
        filled += ok.size
        tries += 1
    # exp can round a log just above ln t' back onto t'
    return np.maximum(out, np.nextafter(t_prime, np.inf))


def split_batch(batch: int, rho: float) -> tuple[int, int]:
    """(boundary count, consistency count) = (floor(B rho), B - floor(B rho))."""
    if batch < 2 or not 0.0 < rho < 1.0:
        raise ConfigError(f"need B >= 2 and 0 < rho < 1, got B={batch}, rho={rho}")
    n_b = math.floor(batch * rho)
    if n_b == 0 or n_b == batch:
        raise ConfigError(f"B={batch}, rho={rho} leaves one of the two sub-batches empty")
    return n_b, batch - n_b


@dataclass(frozen=True)
class TimeSampler:
    """One of ``lognormal`` or ``log-student-t`` (the latter truncated to ``(t', T]``)."""

    kind: str = "lognormal"
    mu: float = -1.1
    sigma: float = 2.0
    nu: float = 0.01
    t_prime: float = 1.0
    t_lo: float = T_MIN
    T: float = T_MAX

    def __post_init__(self):
        if self.kind not in ("lognormal", "log-student-t"):
            raise ConfigError(f"unknown time sampler {self.kind!r}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "lognormal":
            return sample_lognormal(self.mu, self.sigma, n, rng, self.t_lo, self.T)
        return sample_log_student_t(self.mu, self.sigma, self.nu, self.t_prime, n, rng, self.T)
