"""Self-checks of the exact-score oracle against independent numerical references."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .metrics import w2
from .network import CmParams
from .oracle import T_MAX, T_MIN, Dataset, exact_score, log_density, oracle_sample, pf_ode_solve
from .rng import stream


def _grad_vector(loss_fn, params) -> np.ndarray:
    tape = ad.Tape()
    nodes = params.bind(tape)
    grads = {n.name: g for n, g in tape.backward(loss_fn(nodes)).items()}
    return np.concatenate([grads[k].ravel() for k in sorted(grads)])


@dataclass
class OracleCheck:
    name: str
    value: float
    bound: str
    passed: bool
    detail: str = ""


def score_fd_error(data: Dataset, seed: int = 0, n: int = 1000, rel_step: float = 1e-3) -> float:
    """Max relative error of ``exact_score`` against finite differences of ``log_density``.

    Times are log-uniform on [t_min, T]; points are perturbed data at that time.
    The five-point stencil (fourth order) uses step ``rel_step * t`` per coordinate.
    """
    rng = stream(seed, "check/score")
    t = np.exp(rng.uniform(np.log(T_MIN), np.log(T_MAX), n))
    x = data.sample(n, rng) + t[:, None] * rng.standard_normal((n, data.d))
    score = exact_score(x, t, data)
    fd = np.empty_like(x)
    for j in range(data.d):
        h = np.zeros_like(x)
        h[:, j] = rel_step * t
        f = {k: log_density(x + k * h, t, data) for k in (-2, -1, 1, 2)}
        fd[:, j] = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * rel_step * t)
    err = np.linalg.norm(score - fd, axis=1) / np.linalg.norm(score, axis=1)
    return float(err.max())


def heun_ratios(data: Dataset, seed: int = 0, n: int = 64, t_start: float = T_MAX, t_end: float = 0.5,
                steps=(16, 32, 64, 128, 256)) -> list[float]:
    """Error ratios per step halving, each error measured against the next-finer solution.

    A second-order method gives ratios near 4.
    """
    rng = stream(seed, "check/heun")
    x = t_start * rng.standard_normal((n, data.d))
    sols = [pf_ode_solve(x, t_start, t_end, s, data) for s in steps]
    errs = [np.abs(a - b).max() for a, b in zip(sols, sols[1:])]
    return [float(a / b) for a, b in zip(errs, errs[1:])]


def semigroup_error(data: Dataset, seed: int = 0, n: int = 64, t_mid: float = 1.0, steps: int = 400) -> float:
    """Max distance between one T->t_min solve and the composition T->t_mid->t_min, 400 steps per solve."""
    rng = stream(seed, "check/semigroup")
    x = T_MAX * rng.standard_normal((n, data.d))
    direct = pf_ode_solve(x, T_MAX, T_MIN, steps, data)
    composed = pf_ode_solve(pf_ode_solve(x, T_MAX, t_mid, steps, data), t_mid, T_MIN, steps, data)
    return float(np.abs(direct - composed).max())


def marginal_w2(data: Dataset, seed: int = 0, n: int = 4096, steps: int = 128) -> tuple[float, float]:
    """``(W2(oracle samples, data), W2(data, data))`` with exact assignment on n points each."""
    gen = oracle_sample(n, data, stream(seed, "check/marginal/gen"), steps)
    ref = data.sample(n, stream(seed, "check/marginal/ref"))
    base = data.sample(n, stream(seed, "check/marginal/base"))
    return w2(gen, ref, "exact"), w2(base, ref, "exact")


def ct_cd_cosine(params: CmParams, data: Dataset, cfg, seed: int = 0, n: int = 4096, t: float = 2.0,
                 dt_ratio: float = 1e-2) -> float:
    """Cosine between the parameter gradients of the CT and CD losses on one shared batch.

    Both losses see the same ``x_t = x + t eps``; CT steps back along the sampled
    noise while CD steps back along the exact PF ODE, so the two agree as ``dt -> 0``.
    """
    from .training import cd_pair_loss, ct_pair_loss

    rng = stream(seed, "check/ct-cd")
    x = data.sample(n, rng)
    eps = rng.standard_normal(x.shape)
    dt = dt_ratio * t
    g_ct = _grad_vector(lambda nodes: ct_pair_loss(params, params, x, eps, t, dt, cfg, nodes), params)
    g_cd = _grad_vector(lambda nodes: cd_pair_loss(params, params, x + t * eps, t, dt, data, cfg, nodes), params)
    return float(g_ct @ g_cd / (np.linalg.norm(g_ct) * np.linalg.norm(g_cd)))


def run_oracle_checks(data: Dataset, seed: int = 0, n_samples: int = 4096) -> list[OracleCheck]:
    out = []
    e = score_fd_error(data, seed)
    out.append(OracleCheck("score_vs_fd", e, "< 1e-6", e < 1e-6))
    ratios = heun_ratios(data, seed)
    ok = all(3.2 <= r <= 4.8 for r in ratios)
    out.append(OracleCheck("heun_order", min(ratios), "ratios in [3.2, 4.8]", ok,
                           " ".join(f"{r:.3f}" for r in ratios)))
    s = semigroup_error(data, seed)
    out.append(OracleCheck("semigroup", s, "< 1e-6", s < 1e-6))
    gen, base = marginal_w2(data, seed, n_samples)
    out.append(OracleCheck("marginal_w2", gen, f"<= 2 x {base:.4f}", gen <= 2 * base, f"baseline {base:.6f}"))
    return out


def format_checks(results: list[OracleCheck]) -> str:
    return "\n".join(f"{r.name:<12} {r.value:12.4e}  {r.bound:<22} {'ok' if r.passed else 'FAIL'}  {r.detail}"
                     for r in results)
