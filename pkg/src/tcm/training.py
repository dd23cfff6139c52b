"""Consistency losses, Adam, EMA and the two training stages.

Stage 1 is plain consistency training over the whole time range.  Stage 2
starts from the stage-1 weights, keeps a frozen copy of them, and trains only
on ``[t', T]``: a boundary term ties the student at ``t'`` to the frozen
model while the consistency term propagates that anchor up to ``T``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .metrics import MetricRecord, evaluate
from .network import Arch, Checkpoint, CmParams, TruncPair, c_out, cm_forward, init_params, trunc_forward
from .oracle import T_MIN, Dataset, NoiseSpec, exact_score
from .rng import stream
from .schedules import RProfile, TimeSampler, delta_t, r_at, split_batch

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "wall_s", "loss", "loss_boundary", "loss_consistency", "grad_norm", "lr", "r")


class ScheduleError(ValueError):
    """The teacher time would fall below ``t_min``."""


class DivergenceError(RuntimeError):
    """Training was aborted by the divergence guard."""

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class LossConfig:
    c: float = 0.03 * math.sqrt(2)
    omega: str = "unit"
    w_b: float = 0.1
    rho: float = 0.25
    t_min: float = T_MIN
    sigma_data: float = 0.5

    @classmethod
    def from_train_config(cls, cfg: TrainConfig) -> "LossConfig":
        return cls(cfg.huber_c, cfg.loss.omega, cfg.loss.w_b, cfg.loss.rho, cfg.noise.t_min, cfg.noise.sigma_data)


# distances and weights ---------------------------------------------------------

def pseudo_huber(a, b, c: float):
    """Per-row ``sqrt(|a - b|^2 + c^2) - c``.  Node inputs give a Node result."""
    if isinstance(a, ad.Node) or isinstance(b, ad.Node):
        sq = ad.sum_rows(ad.square(ad.sub(a, b)))
        return ad.sub(ad.sqrt(ad.add(sq, c * c)), c)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ad.DimensionError(f"pseudo_huber: {a.shape} vs {b.shape}")
    return np.sqrt(np.sum((a - b) ** 2, axis=1) + c * c) - c


def pair_weight(t, dt, cfg: LossConfig) -> np.ndarray:
    """``omega(t) / dt`` per sample."""
    t = np.asarray(t, dtype=np.float64)
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), t.shape)
    if cfg.omega == "unit":
        omega = np.ones_like(t)
    elif cfg.omega == "dt-over-cout2":
        omega = dt / c_out(t, cfg.sigma_data) ** 2
    else:
        raise ValueError(f"unknown weighting {cfg.omega!r}")
    return omega / dt


def _check_times(t, dt, t_min):
    if np.any(dt <= 0):
        raise ScheduleError("time gaps must be positive")
    if np.any(t - dt < t_min * (1.0 - 1e-12)):
        raise ScheduleError(f"teacher time t - dt fell below t_min={t_min}")


def _evaluate(model, x, t):
    if isinstance(model, CmParams):
        return cm_forward(model, x, t)
    if isinstance(model, TruncPair):
        return trunc_forward(model, x, t)
    return model(x, t)


def _weighted_mean(per_sample, weights):
    if isinstance(per_sample, ad.Node):
        return ad.mean(ad.mul(per_sample, weights))
    return float(np.mean(per_sample * weights))


def _student(student, x, t, nodes):
    if nodes is not None:
        return cm_forward(student, x, t, nodes)
    return _evaluate(student, x, t)


def _times_like(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t


# losses -------------------------------------------------------------------------

def ct_pair_loss(student, teacher, x, eps, t, dt, cfg: LossConfig, nodes=None):
    """Consistency-training loss; the teacher is evaluated without gradients.

    ``student`` is a :class:`CmParams` (bound to ``nodes`` when given) or any
    ``(x, t) -> x0`` callable; ``teacher`` may also be a :class:`TruncPair`.
    """
    x = np.asarray(x, dtype=np.float64)
    t = _times_like(t, len(x))
    dt = _times_like(dt, len(x))
    _check_times(t, dt, cfg.t_min)
    ts = t[:, None]
    out = _student(student, x + ts * eps, t, nodes)
    target = _evaluate(teacher, x + (ts - dt[:, None]) * eps, t - dt)
    return _weighted_mean(pseudo_huber(out, target, cfg.c), pair_weight(t, dt, cfg))


def cd_pair_loss(student, teacher, x_t, t, dt, data: Dataset, cfg: LossConfig, nodes=None):
    """Consistency-distillation loss: the teacher input is one Euler step of the exact PF ODE."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = _times_like(t, len(x_t))
    dt = _times_like(dt, len(x_t))
    _check_times(t, dt, cfg.t_min)
    x_prev = x_t + (t * dt)[:, None] * exact_score(x_t, t, data)
    out = _student(student, x_t, t, nodes)
    target = _evaluate(teacher, x_prev, t - dt)
    return _weighted_mean(pseudo_huber(out, target, cfg.c), pair_weight(t, dt, cfg))


def boundary_loss(student, frozen, x, eps, t_prime: float, dt_prime: float, cfg: LossConfig, nodes=None):
    """Ties the student at ``t'`` to the frozen model one gap below it."""
    return ct_pair_loss(student, frozen, x, eps, t_prime, dt_prime, cfg, nodes)


@dataclass
class TcmLoss:
    total: object
    boundary: float
    consistency: float


def tcm_step_loss(pair: TruncPair, x, eps, t_cons, r: float, cfg: LossConfig, nodes=None) -> TcmLoss:
    """Truncated objective on one batch.

    The first ``floor(B rho)`` rows sit at ``t'`` and form the boundary term
    (weighted by ``w_b``); the rest use the supplied times ``t_cons`` and form
    the consistency term.  The teacher of every row is the truncated model with
    gradients stopped, so rows whose teacher time falls below ``t'`` are
    answered by the frozen model.
    """
    x = np.asarray(x, dtype=np.float64)
    n_b, n_c = split_batch(len(x), cfg.rho)
    t_cons = np.asarray(t_cons, dtype=np.float64)
    if t_cons.shape != (n_c,):
        raise ad.DimensionError(f"expected {n_c} consistency times, got {t_cons.shape}")
    if np.any(t_cons <= pair.t_prime):
        raise ValueError("consistency times must exceed t'")
    t = np.concatenate([np.full(n_b, pair.t_prime), t_cons])
    dt = delta_t(t, r, cfg.t_min)
    _check_times(t, dt, cfg.t_min)
    ts = t[:, None]
    out = _student(pair.student, x + ts * eps, t, nodes)
    teacher = TruncPair(pair.student, pair.frozen, pair.t_prime)
    target = trunc_forward(teacher, x + (ts - dt[:, None]) * eps, t - dt)
    per = pseudo_huber(out, target, cfg.c)
    base = pair_weight(t, dt, cfg)
    mix = np.concatenate([np.full(n_b, cfg.w_b / n_b), np.full(n_c, 1.0 / n_c)])
    vals = per.value if isinstance(per, ad.Node) else per
    lb = float(np.sum(vals[:n_b] * base[:n_b]) / n_b)
    lc = float(np.sum(vals[n_b:] * base[n_b:]) / n_c)
    if isinstance(per, ad.Node):
        total = ad.sum_all(ad.mul(per, base * mix))
    else:
        total = float(np.sum(vals * base * mix))
    return TcmLoss(total, lb, lc)


# optimizer and EMA ---------------------------------------------------------------

@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    kind: str = "constant"
    t_ref: int = 8000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray], **kw) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()}, **kw)

    def lr_at(self, step: int) -> float:
        if self.kind == "constant":
            return self.lr
        if self.kind == "inv-sqrt":
            return self.lr / math.sqrt(max(step / self.t_ref, 1.0))
        raise ValueError(f"unknown learning-rate schedule {self.kind!r}")


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState,
              lr: float | None = None) -> tuple[dict[str, np.ndarray], OptState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    step = opt.step + 1
    lr = opt.lr_at(step) if lr is None else lr
    b1, b2 = opt.beta1, opt.beta2
    new, m_new, v_new = {}, {}, {}
    for k, p in arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
        m = opt.m[k] * b1
        m += (1 - b1) * g
        v = opt.v[k] * b2
        v += (1 - b2) * (g * g)
        # lr * m_hat / (sqrt(v_hat) + eps), written with fresh temporaries only
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(1 - b2 ** step)
        denom += opt.eps
        upd = m * (lr / (1 - b1 ** step))
        upd /= denom
        new[k] = p - upd
        m_new[k], v_new[k] = m, v
    return new, replace(opt, m=m_new, v=v_new, step=step)


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    beta: float = 0.9999


def ema_update(ema: EmaState, arrays: dict[str, np.ndarray]) -> EmaState:
    b = ema.beta
    shadow = {}
    for k, s in ema.shadow.items():
        if s.shape != arrays[k].shape:
            raise ad.DimensionError(f"EMA shape mismatch for {k}")
        out = s * b
        out += (1 - b) * arrays[k]
        shadow[k] = out
    return EmaState(shadow, b)


# trainers --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[MetricRecord] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, CmParams]] = field(default_factory=list)


def arch_of(cfg: TrainConfig) -> Arch:
    return Arch(cfg.data.d, tuple(cfg.arch.hidden), cfg.arch.n_freq, cfg.arch.fourier_scale)


def noise_of(cfg: TrainConfig) -> NoiseSpec:
    return NoiseSpec(cfg.noise.t_min, cfg.noise.T, cfg.noise.sigma_data)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


class _Guard:
    def __init__(self, ceiling: float, patience: int):
        self.ceiling, self.patience, self.strikes = ceiling, patience, 0

    def check(self, loss: float, gnorm: float, iteration: int) -> None:
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            raise DivergenceError(f"non-finite loss or gradient at iteration {iteration}", iteration)
        self.strikes = self.strikes + 1 if gnorm > self.ceiling else 0
        if self.strikes >= self.patience:
            raise DivergenceError(
                f"gradient norm above {self.ceiling} for {self.patience} consecutive steps "
                f"(iteration {iteration}, last norm {gnorm:.3g})", iteration)


def _run(cfg: TrainConfig, data: Dataset, params: CmParams, iters: int, batch: int, opt: OptState,
         step_fn, stage: int, meta: dict, callback=None) -> TrainResult:
    """Shared optimization loop; ``step_fn(params, nodes, i) -> (loss node, lb, lc, r)``."""
    ema = EmaState({k: v.copy() for k, v in params.arrays.items()}, cfg.ema.beta)
    guard = _Guard(cfg.train.grad_ceiling, cfg.train.patience)
    spec = noise_of(cfg)
    result = TrainResult(Checkpoint(params, params, {}))
    start = time.perf_counter()

    def snapshot(i):
        ema_params = params.with_arrays(ema.shadow)
        result.snapshots.append((i, ema_params))
        rec = evaluate(ema_params, data, cfg.seed, i, cfg.eval.n, cfg.eval.grid, cfg.t_mid,
                       cfg.eval.gap_grid, cfg.eval.gap_n, spec)
        result.records.append(rec)
        log.info("stage %d iter %d: one-step W2 %.4f, dfid %s", stage, i, rec.one_step_div,
                 ", ".join(f"{t:g}:{v:.4f}" for t, v in rec.dfid_grid))

    if cfg.train.eval_every:
        snapshot(0)
    for i in range(1, iters + 1):
        tape = ad.Tape()
        nodes = params.bind(tape)
        try:
            loss, lb, lc, r = step_fn(params, nodes, i)
            named = {n.name: g for n, g in tape.backward(loss).items()}
        except FloatingPointError as exc:
            raise DivergenceError(f"iteration {i}: {exc}", i) from exc
        loss_val = float(loss.value)
        gnorm = grad_norm(named)
        guard.check(loss_val, gnorm, i)
        lr = opt.lr_at(opt.step + 1)
        arrays, opt = adam_step(params.arrays, named, opt)
        params = params.with_arrays(arrays)
        ema = ema_update(ema, arrays)
        if i % cfg.train.log_every == 0 or i == iters:
            result.log.append(dict(iter=i, wall_s=time.perf_counter() - start, loss=loss_val, loss_boundary=lb,
                                   loss_consistency=lc, grad_norm=gnorm, lr=lr, r=r))
            log.debug("stage %d iter %d: loss %.4g grad norm %.3g r %.4f", stage, i, loss_val, gnorm, r)
        if cfg.train.eval_every and (i % cfg.train.eval_every == 0 or i == iters):
            snapshot(i)
        if callback is not None:
            callback(i, params, ema)
    ckpt_meta = dict(meta, stage=stage, iteration=iters, seed=cfg.seed)
    result.checkpoint = Checkpoint(params, params.with_arrays(ema.shadow), ckpt_meta)
    return result


def train_stage1(cfg: TrainConfig, data: Dataset, callback=None) -> TrainResult:
    """Consistency training over ``[t_min, T]`` with log-normal times and the r curriculum."""
    params = init_params(cfg.seed, arch_of(cfg), cfg.noise.sigma_data)
    lcfg = LossConfig.from_train_config(cfg)
    sampler = TimeSampler("lognormal", cfg.time1.mu, cfg.time1.sigma, t_lo=cfg.time1.lo, T=cfg.noise.T)
    profile = RProfile(cfg.schedule.base, cfg.schedule.period, cfg.schedule.r_cap)
    rx, re, rt = (stream(cfg.seed, f"train1/{k}") for k in ("x", "eps", "t"))
    batch = cfg.train.batch1

    def step(params, nodes, i):
        x = data.sample(batch, rx)
        eps = re.standard_normal((batch, data.d))
        t = sampler.sample(batch, rt)
        r = r_at(i, profile)
        dt = delta_t(t, r, cfg.noise.t_min)
        loss = ct_pair_loss(params, params, x, eps, t, dt, lcfg, nodes)
        return loss, 0.0, float(loss.value), r

    opt = OptState.zeros_like(params.arrays, lr=cfg.opt1.lr, kind=cfg.opt1.kind, t_ref=cfg.opt1.t_ref)
    return _run(cfg, data, params, cfg.train.iters1, batch, opt, step, 1, {}, callback)


def train_stage2(stage1: Checkpoint, cfg: TrainConfig, data: Dataset, callback=None) -> TrainResult:
    """Truncated training on ``[t', T]`` anchored to the frozen stage-1 evaluation weights."""
    frozen = stage1.eval_params.copy()
    if frozen.arch != arch_of(cfg) or frozen.sigma_data != cfg.noise.sigma_data:
        raise ValueError("stage-1 checkpoint does not match the configured architecture / sigma_data")
    frozen_bytes = {k: v.tobytes() for k, v in frozen.arrays.items()}
    lcfg = LossConfig.from_train_config(cfg)
    t_prime = cfg.t_prime
    sampler = TimeSampler(cfg.time.kind, cfg.student_t_mu, cfg.time.sigma, cfg.time.nu, t_prime,
                          t_lo=t_prime, T=cfg.noise.T)
    r = cfg.schedule.r_cap
    rx, re, rt = (stream(cfg.seed, f"train2/{k}") for k in ("x", "eps", "t"))
    batch = cfg.train.batch2
    n_b, n_c = split_batch(batch, cfg.loss.rho)

    def step(params, nodes, i):
        x = data.sample(batch, rx)
        eps = re.standard_normal((batch, data.d))
        t_cons = sampler.sample(n_c, rt)
        if cfg.time.kind == "lognormal":
            t_cons = np.maximum(t_cons, np.nextafter(t_prime, np.inf))
        out = tcm_step_loss(TruncPair(params, frozen, t_prime), x, eps, t_cons, r, lcfg, nodes)
        return out.total, out.boundary, out.consistency, r

    opt = OptState.zeros_like(frozen.arrays, lr=cfg.opt2.lr, kind=cfg.opt2.kind, t_ref=cfg.opt2.t_ref)
    result = _run(cfg, data, frozen.copy(), cfg.train.iters2, batch, opt, step, 2,
                  {"t_prime": float(t_prime)}, callback)
    if any(frozen.arrays[k].tobytes() != b for k, b in frozen_bytes.items()):
        raise RuntimeError("frozen stage-1 weights were modified during stage 2")
    return result
