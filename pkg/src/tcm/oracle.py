"""Ground truth for the variance-exploding diffusion on a finite dataset.

The perturbed distribution ``p_t`` of a finite point set is an equal-weight
Gaussian mixture with centers at the data points and covariance ``t^2 I``, so
its log density, score and posterior mean are all available in closed form.
Everything a consistency network learns can be checked against these.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .rng import stream

T_MIN = 0.002
T_MAX = 80.0
SIGMA_DATA = 0.5

DATASETS = ("ring8", "grid25", "two-moons")


@dataclass(frozen=True)
class NoiseSpec:
    t_min: float = T_MIN
    T: float = T_MAX
    sigma_data: float = SIGMA_DATA

    def __post_init__(self):
        if not 0.0 < self.t_min < self.T:
            raise ValueError(f"need 0 < t_min < T, got t_min={self.t_min}, T={self.T}")
        if self.sigma_data <= 0.0:
            raise ValueError("sigma_data must be positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Finite point set in R^d, normalized to zero mean and std ``sigma_data``.

    ``centers`` holds the generating mode locations (in normalized
    coordinates) when the set came from a built-in generator.  ``offset`` and
    ``scale`` record the normalization applied to the raw points.
    """

    points: np.ndarray
    sigma_data: float = SIGMA_DATA
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None
    centers: np.ndarray | None = None
    name: str = "custom"
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError(f"dataset needs an (N>=2, d) array, got shape {pts.shape}")
        if pts.shape[1] > 8:
            raise ValueError("datasets are limited to d <= 8")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_sq_norms", np.einsum("ij,ij->i", pts, pts))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_raw(cls, raw, sigma_data: float = SIGMA_DATA, centers=None, name: str = "custom") -> "Dataset":
        raw = np.asarray(raw, dtype=np.float64)
        offset = raw.mean(axis=0)
        scale = raw.std(axis=0)
        if np.any(scale <= 0.0):
            raise ValueError("every dimension needs nonzero spread to normalize")
        pts = (raw - offset) / scale * sigma_data
        # second centering pass removes the rounding residue of the first
        pts = pts - pts.mean(axis=0)
        if centers is not None:
            centers = (np.asarray(centers, dtype=np.float64) - offset) / scale * sigma_data
        return cls(pts, sigma_data, offset, scale, centers, name)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` points drawn uniformly with replacement."""
        return self.points[rng.integers(0, self.n, size=n)]

    def sq_dists(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        sq = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * x @ self.points.T + self._sq_norms[None, :]
        return np.maximum(sq, 0.0)


def _ring8_raw(n, rng):
    angles = 2.0 * np.pi * np.arange(8) / 8
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(n) % 8
    return centers[labels] + 0.15 * rng.standard_normal((n, 2)), centers


def _grid25_raw(n, rng):
    ticks = np.linspace(-2.0, 2.0, 5)
    centers = np.stack(np.meshgrid(ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 2)
    labels = np.arange(n) % 25
    return centers[labels] + 0.1 * rng.standard_normal((n, 2)), centers


def _two_moons_raw(n, rng):
    n_out = n // 2
    a = np.pi * rng.random(n_out)
    b = np.pi * rng.random(n - n_out)
    upper = np.stack([np.cos(a), np.sin(a)], axis=1)
    lower = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    raw = np.concatenate([upper, lower]) + 0.05 * rng.standard_normal((n, 2))
    return raw, None


def make_dataset(name: str, n: int = 2048, d: int = 2, seed: int = 0, sigma_data: float = SIGMA_DATA) -> Dataset:
    """Build one of the named toy datasets (all are planar; ``d`` must be 2)."""
    builders = {"ring8": _ring8_raw, "grid25": _grid25_raw, "two-moons": _two_moons_raw}
    if name not in builders:
        raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    if d != 2:
        raise ValueError(f"{name} is a planar dataset; d must be 2")
    if n < 2:
        raise ValueError("need at least two points")
    raw, centers = builders[name](n, stream(seed, f"dataset/{name}"))
    return Dataset.from_raw(raw, sigma_data, centers, name)


def perturb(x, t, eps):
    """``x + t * eps``: a draw from p_t given its clean point and noise."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if t.ndim == 1 and x.ndim == 2:
        t = t[:, None]
    return x + t * np.asarray(eps, dtype=np.float64)


def _times(t, n):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("t must be strictly positive")
    return np.broadcast_to(t, (n,)) if t.ndim == 0 else t


def log_density(x, t, data: Dataset):
    """log p_t(x), log-sum-exp stabilized.  Accepts one point or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    tt = _times(t, x2.shape[0])
    logits = -data.sq_dists(x2) / (2.0 * tt[:, None] ** 2)
    out = logsumexp(logits, axis=1) - math.log(data.n) - data.d * (np.log(tt) + 0.5 * math.log(2.0 * math.pi))
    return out[0] if single else out


def posterior_weights(x, t, data: Dataset) -> np.ndarray:
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tt = _times(t, x2.shape[0])
    return softmax(-data.sq_dists(x2) / (2.0 * tt[:, None] ** 2), axis=1)


def oracle_denoise(x_t, t, data: Dataset):
    """Posterior mean E[x_0 | x_t]: softmax-weighted average of the data points."""
    x = np.asarray(x_t, dtype=np.float64)
    out = posterior_weights(x, t, data) @ data.points
    return out[0] if x.ndim == 1 else out


def exact_score(x, t, data: Dataset):
    """grad_x log p_t(x) = (E[x_0 | x] - x) / t^2."""
    x = np.asarray(x, dtype=np.float64)
    denoised = oracle_denoise(x, t, data)
    tt = np.asarray(t, dtype=np.float64)
    if tt.ndim == 1 and x.ndim == 2:
        tt = tt[:, None]
    return (denoised - x) / tt ** 2


def time_grid(t_start: float, t_end: float, steps: int, kind: str = "geometric", rho: float = 7.0) -> np.ndarray:
    """Decreasing grid of ``steps + 1`` times from ``t_start`` to ``t_end``."""
    if kind == "geometric":
        grid = np.exp(np.linspace(math.log(t_start), math.log(t_end), steps + 1))
    elif kind == "edm":
        i = np.arange(steps + 1) / steps
        grid = (t_start ** (1 / rho) + i * (t_end ** (1 / rho) - t_start ** (1 / rho))) ** rho
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    grid[0], grid[-1] = t_start, t_end
    return grid


def pf_ode_solve(x_start, t_start: float, t_end: float, steps: int, data: Dataset,
                 t_min: float = T_MIN, grid: str = "geometric"):
    """Integrate dx/dt = -t * score(x, t) from ``t_start`` down to ``t_end`` with Heun's method."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if t_end < t_min or t_start < t_end:
        raise ValueError(f"need t_start >= t_end >= t_min, got {t_start}, {t_end}")
    x = np.array(x_start, dtype=np.float64)
    if t_start == t_end:
        return x

    def drift(x, t):
        # -t * score = (x - D(x)) / t
        return (x - oracle_denoise(x, t, data)) / t

    ts = time_grid(t_start, t_end, steps, grid)
    for i in range(steps):
        t_cur, t_next = ts[i], ts[i + 1]
        h = t_next - t_cur
        d_cur = drift(x, t_cur)
        x_euler = x + h * d_cur
        x = x + 0.5 * h * (d_cur + drift(x_euler, t_next))
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"PF ODE state became non-finite at step {i}")
    return x


def oracle_endpoint(x_t, t: float, data: Dataset, steps: int = 400, t_min: float = T_MIN):
    """Exact consistency function: the PF ODE solution at ``t_min`` started from ``(x_t, t)``."""
    if t < t_min:
        raise ValueError(f"t must be >= t_min ({t_min})")
    if t == t_min:
        return np.array(x_t, dtype=np.float64)
    return pf_ode_solve(x_t, t, t_min, steps, data, t_min)


def oracle_sample(n: int, data: Dataset, rng: np.random.Generator, steps: int = 128,
                  spec: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Generate by solving the PF ODE from N(0, T^2 I) noise."""
    x_T = spec.T * rng.standard_normal((n, data.d))
    return pf_ode_solve(x_T, spec.T, spec.t_min, steps, data, spec.t_min)


# dataset files ---------------------------------------------------------------

def _format_row(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_points(path, points: np.ndarray, sigma_data: float, kind: str = "tcm-dataset") -> None:
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    lines = [f"{kind} v1 d={d} n={n} sigma_data={float(sigma_data)!r}"]
    lines += [_format_row(r) for r in points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path, kind: str = "tcm-dataset") -> tuple[np.ndarray, float]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != kind or head[1] != "v1":
        raise ValueError(f"{path}: expected a '{kind} v1' header, got {lines[0]!r}")
    fields = dict(item.split("=", 1) for item in head[2:])
    d, n, sigma = int(fields["d"]), int(fields["n"]), float(fields["sigma_data"])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: header says n={n} but found {len(rows)} rows")
    pts = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64).reshape(n, d)
    return pts, sigma


def save_dataset(path, data: Dataset) -> None:
    write_points(path, data.points, data.sigma_data)


def load_dataset(path) -> Dataset:
    pts, sigma = read_points(path)
    return Dataset(pts, sigma, name=Path(path).stem)
