"""Samplers and point-cloud metrics standing in for FID at toy scale."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .network import CmParams, cm_forward
from .oracle import Dataset, NoiseSpec, oracle_endpoint, perturb
from .rng import stream

DEFAULT_GRID = (0.2, 0.5, 1.0, 2.0, 5.0, 80.0)
EXACT_MAX_N = 512
N_SLICES = 64

ConsistencyFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def as_fn(model) -> ConsistencyFn:
    """Accept either parameters or a plain ``(x, t) -> x0`` callable."""
    if isinstance(model, CmParams):
        return lambda x, t: cm_forward(model, x, t)
    return model


def _times(t, n):
    return np.full(n, float(t))


def w2_exact(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"exact W2 needs equal-size clouds, got {a.shape} and {b.shape}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(math.sqrt(max(cost[rows, cols].mean(), 0.0)))


def _slices(d: int) -> np.ndarray:
    dirs = stream(0, "w2/slices").standard_normal((N_SLICES, d))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def w2_sliced(a: np.ndarray, b: np.ndarray) -> float:
    """Sliced W2 over fixed directions, scaled by sqrt(d) to match W2 for isotropic shifts."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds live in different dimensions")
    d = a.shape[1]
    pa = np.sort(a @ _slices(d).T, axis=0)
    pb = np.sort(b @ _slices(d).T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        q = (np.arange(max(len(pa), len(pb))) + 0.5) / max(len(pa), len(pb))
        pa = np.quantile(pa, q, axis=0)
        pb = np.quantile(pb, q, axis=0)
    return float(math.sqrt(d * np.mean((pa - pb) ** 2)))


def w2(a, b, mode: str = "auto") -> float:
    """2-Wasserstein distance between point clouds: exact assignment up to 512 points, sliced above."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if mode == "auto":
        mode = "exact" if max(len(a), len(b)) <= EXACT_MAX_N else "sliced"
    if mode == "exact":
        return w2_exact(a, b)
    if mode == "sliced":
        return w2_sliced(a, b)
    raise ValueError(f"unknown W2 mode {mode!r}")


def sample_onestep(model, n: int, rng: np.random.Generator, spec: NoiseSpec = NoiseSpec(), d: int = 2) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    fn = as_fn(model)
    return fn(spec.T * rng.standard_normal((n, d)), _times(spec.T, n))


def sample_twostep(model, n: int, t_mid: float, rng: np.random.Generator,
                   spec: NoiseSpec = NoiseSpec(), d: int = 2) -> np.ndarray:
    """Generate at T, re-noise to ``t_mid`` with fresh noise, generate again."""
    if not spec.t_min <= t_mid < spec.T:
        raise ValueError(f"t_mid must lie in [t_min, T), got {t_mid}")
    fn = as_fn(model)
    first = fn(spec.T * rng.standard_normal((n, d)), _times(spec.T, n))
    x_mid = first + t_mid * rng.standard_normal((n, d))
    return fn(x_mid, _times(t_mid, n))


def denoising_divergence(model, t: float, data: Dataset, n: int, rng: np.random.Generator,
                         mode: str = "auto") -> float:
    """W2 between data and model-denoised perturbed data at noise level ``t``."""
    clean = data.sample(n, rng)
    noisy = perturb(clean, t, rng.standard_normal(clean.shape))
    denoised = as_fn(model)(noisy, _times(t, n))
    return w2(denoised, data.sample(n, rng), mode)


def oracle_gap(model, t: float, data: Dataset, n: int, rng: np.random.Generator,
               steps: int = 400, t_min: float = NoiseSpec().t_min) -> float:
    """Mean distance between the model and the exact PF-ODE endpoint from the same noisy points."""
    clean = data.sample(n, rng)
    x_t = perturb(clean, t, rng.standard_normal(clean.shape))
    ours = as_fn(model)(x_t, _times(t, n))
    exact = oracle_endpoint(x_t, t, data, steps, t_min)
    return float(np.linalg.norm(ours - exact, axis=1).mean())


def mode_counts(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    nearest = np.argmin(cdist(samples, centers, "sqeuclidean"), axis=1)
    return np.bincount(nearest, minlength=len(centers))


def mode_coverage(samples: np.ndarray, centers: np.ndarray, threshold: float = 0.02) -> int:
    """Number of modes receiving at least ``threshold`` of the samples."""
    counts = mode_counts(samples, centers)
    return int(np.sum(counts >= threshold * len(samples)))


@dataclass
class MetricRecord:
    iteration: int
    one_step_div: float
    two_step_div: float
    dfid_grid: list[tuple[float, float]] = field(default_factory=list)
    oracle_gap_grid: list[tuple[float, float]] = field(default_factory=list)
    sample_count: int = 0

    def dfid(self, t: float) -> float:
        for tt, v in self.dfid_grid:
            if math.isclose(tt, t):
                return v
        raise KeyError(t)


def evaluate(model, data: Dataset, seed: int, iteration: int = 0, n: int = 2048,
             grid=DEFAULT_GRID, t_mid: float = 1.0, gap_grid=(), gap_n: int = 128,
             spec: NoiseSpec = NoiseSpec()) -> MetricRecord:
    """Full metric row for one model; every quantity gets its own seeded stream."""
    fn = as_fn(model)
    one = sample_onestep(fn, n, stream(seed, "eval/onestep"), spec, data.d)
    two = sample_twostep(fn, n, t_mid, stream(seed, "eval/twostep"), spec, data.d)
    ref = data.sample(n, stream(seed, "eval/reference"))
    dfid = [(float(t), denoising_divergence(fn, t, data, n, stream(seed, "eval/dfid", i)))
            for i, t in enumerate(sorted(grid))]
    gaps = [(float(t), oracle_gap(fn, t, data, gap_n, stream(seed, "eval/gap", i), t_min=spec.t_min))
            for i, t in enumerate(sorted(gap_grid))]
    return MetricRecord(iteration, w2(one, ref), w2(two, ref), dfid, gaps, n)


REPORT_FIELDS = ("ckpt", "iter", "t", "metric", "value", "n", "seed")


def record_rows(ckpt: str, rec: MetricRecord, seed: int, T: float = NoiseSpec().T) -> list[dict]:
    rows = [
        dict(ckpt=ckpt, iter=rec.iteration, t=T, metric="one_step_w2", value=rec.one_step_div),
        dict(ckpt=ckpt, iter=rec.iteration, t=T, metric="two_step_w2", value=rec.two_step_div),
    ]
    rows += [dict(ckpt=ckpt, iter=rec.iteration, t=t, metric="dfid_w2", value=v) for t, v in rec.dfid_grid]
    rows += [dict(ckpt=ckpt, iter=rec.iteration, t=t, metric="oracle_gap", value=v) for t, v in rec.oracle_gap_grid]
    for r in rows:
        r.update(n=rec.sample_count, seed=seed)
    return rows


def write_report(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def tradeoff_report(ckpts: list[tuple[str, CmParams, int]], data: Dataset, seed: int,
                    grid=DEFAULT_GRID, n: int = 2048, t_mid: float = 1.0) -> list[MetricRecord]:
    """One record per ``(label, params, iteration)``, all on the same evaluation streams."""
    if len(ckpts) < 2:
        raise ValueError("a trade-off report needs at least two checkpoints")
    return [evaluate(p, data, seed, it, n, grid, t_mid) for _, p, it in ckpts]


@dataclass
class CollapseReport:
    coverage: int | None
    n_modes: int | None
    variance_ratio: float

    @property
    def collapsed(self) -> bool:
        lost_modes = self.coverage is not None and self.coverage < self.n_modes
        return lost_modes or self.variance_ratio < 0.1


def collapse_check(model, reference, data: Dataset, seed: int, n: int = 4096,
                   spec: NoiseSpec = NoiseSpec()) -> CollapseReport:
    """Compare one-step samples of ``model`` with those of ``reference`` (its initialization).

    Collapse means a lost mode or a total output variance below 10% of the reference's.
    """
    rng_seed = stream(seed, "eval/collapse")
    noise = spec.T * rng_seed.standard_normal((n, data.d))
    t = _times(spec.T, n)
    ours, theirs = as_fn(model)(noise, t), as_fn(reference)(noise, t)
    ratio = float(ours.var(axis=0).sum() / max(theirs.var(axis=0).sum(), 1e-300))
    if data.centers is None:
        return CollapseReport(None, None, ratio)
    return CollapseReport(mode_coverage(ours, data.centers), len(data.centers), ratio)
