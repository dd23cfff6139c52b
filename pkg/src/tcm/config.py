"""Experiment configuration as flat ``section.key=value`` text.

Every key has a typed default; unknown keys and bad values are collected and
reported together.  ``dumps`` writes every key in sorted order, so
``loads(dumps(cfg)) == cfg`` and the hash ignores key order in the source.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

from .schedules import ConfigError


@dataclass(frozen=True)
class DataCfg:
    name: str = "ring8"
    n: int = 2048
    d: int = 2
    seed: int = 7
    path: str = ""


@dataclass(frozen=True)
class NoiseCfg:
    t_min: float = 0.002
    T: float = 80.0
    sigma_data: float = 0.5


@dataclass(frozen=True)
class ArchCfg:
    hidden: tuple[int, ...] = (128, 128, 128)
    n_freq: int = 32
    fourier_scale: float = 0.25


@dataclass(frozen=True)
class LossCfg:
    c: float | None = None  # None -> 0.03 * sqrt(d)
    omega: str = "unit"
    w_b: float = 0.1
    rho: float = 0.25


@dataclass(frozen=True)
class Time1Cfg:
    mu: float = -1.1
    sigma: float = 2.0
    lo: float = 0.004


@dataclass(frozen=True)
class TimeCfg:
    kind: str = "log-student-t"
    mu: float | None = None  # None -> ln t'
    sigma: float = 0.2
    nu: float = 0.01
    t_prime: float = 1.0


@dataclass(frozen=True)
class ScheduleCfg:
    base: float = 2.0
    period: int = 2000
    r_cap: float = 0.999


@dataclass(frozen=True)
class OptCfg:
    lr: float = 3e-4
    kind: str = "constant"
    t_ref: int = 8000


@dataclass(frozen=True)
class EmaCfg:
    beta: float = 0.999


@dataclass(frozen=True)
class TrainCfg:
    batch1: int = 256
    batch2: int = 256
    iters1: int = 20000
    iters2: int = 10000
    log_every: int = 100
    eval_every: int = 1000
    ckpt_every: int = 0
    grad_ceiling: float = 100.0
    patience: int = 10


@dataclass(frozen=True)
class EvalCfg:
    n: int = 2048
    grid: tuple[float, ...] = (0.2, 0.5, 1.0, 2.0, 5.0, 80.0)
    t_mid: float | None = None  # None -> t'
    gap_grid: tuple[float, ...] = ()
    gap_n: int = 128


@dataclass(frozen=True)
class RunCfg:
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    data: DataCfg = field(default_factory=DataCfg)
    noise: NoiseCfg = field(default_factory=NoiseCfg)
    arch: ArchCfg = field(default_factory=ArchCfg)
    loss: LossCfg = field(default_factory=LossCfg)
    time1: Time1Cfg = field(default_factory=Time1Cfg)
    time: TimeCfg = field(default_factory=TimeCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    opt1: OptCfg = field(default_factory=OptCfg)
    opt2: OptCfg = field(default_factory=lambda: OptCfg(lr=5e-4, kind="inv-sqrt", t_ref=8000))
    ema: EmaCfg = field(default_factory=EmaCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    run: RunCfg = field(default_factory=RunCfg)

    # derived values ----------------------------------------------------------
    @property
    def huber_c(self) -> float:
        return 0.03 * math.sqrt(self.data.d) if self.loss.c is None else self.loss.c

    @property
    def t_prime(self) -> float:
        return self.time.t_prime

    @property
    def student_t_mu(self) -> float:
        return math.log(self.time.t_prime) if self.time.mu is None else self.time.mu

    @property
    def t_mid(self) -> float:
        return self.time.t_prime if self.eval.t_mid is None else self.eval.t_mid

    @property
    def seed(self) -> int:
        return self.run.seed

    def override(self, **dotted) -> "TrainConfig":
        """Copy with ``{"loss.w_b": 0.0, ...}``-style overrides (values may be strings)."""
        flat = to_flat(self)
        for k, v in dotted.items():
            if k not in flat:
                raise ConfigError(f"unknown key {k}")
            flat[k] = v if isinstance(v, str) else _format(v)
        return from_flat(flat)


def _sections(cfg_cls=TrainConfig):
    return {f.name: type(f.default_factory()) for f in dataclasses.fields(cfg_cls)}


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(text: str, type_name: str):
    text = text.strip()
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    if type_name == "str":
        return text
    if type_name == "float | None":
        return None if text == "auto" else float(text)
    if type_name == "tuple[int, ...]":
        return tuple(int(x) for x in text.split(",") if x.strip())
    if type_name == "tuple[float, ...]":
        return tuple(float(x) for x in text.split(",") if x.strip())
    raise TypeError(f"unsupported field type {type_name}")


def keys() -> dict[str, str]:
    """Every dotted key with its declared type."""
    out = {}
    for sec, factory in _sections().items():
        for f in dataclasses.fields(factory()):
            out[f"{sec}.{f.name}"] = f.type
    return out


def is_scalar_key(key: str) -> bool:
    return keys().get(key, "").split("[")[0] in ("int", "float", "str", "float | None")


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    flat = {}
    for sec in _sections():
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            flat[f"{sec}.{f.name}"] = _format(getattr(obj, f.name))
    return flat


def from_flat(flat: dict[str, str]) -> TrainConfig:
    known = keys()
    errors = [f"unknown key {k}" for k in flat if k not in known]
    flat = {**to_flat(TrainConfig()), **flat}
    values: dict[str, dict] = {sec: {} for sec in _sections()}
    for k, text in flat.items():
        if k not in known:
            continue
        sec, name = k.split(".", 1)
        try:
            values[sec][name] = _parse(text, known[k])
        except (ValueError, TypeError):
            errors.append(f"{k}: cannot parse {text!r} as {known[k]}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = TrainConfig(**{sec: factory(**values[sec]) for sec, factory in _sections().items()})
    validate(cfg)
    return cfg


def validate(cfg: TrainConfig) -> None:
    """Raise one ConfigError naming every offending key."""
    bad = []

    def need(ok, key, why):
        if not ok:
            bad.append(f"{key}: {why}")

    need(cfg.data.name in ("ring8", "grid25", "two-moons") or cfg.data.path, "data.name", "unknown dataset")
    need(cfg.data.n >= 2, "data.n", "must be >= 2")
    need(1 <= cfg.data.d <= 8, "data.d", "must be in 1..8")
    need(0 < cfg.noise.t_min < cfg.noise.T, "noise.t_min", "need 0 < t_min < T")
    need(cfg.noise.sigma_data > 0, "noise.sigma_data", "must be positive")
    need(len(cfg.arch.hidden) >= 1 and all(h > 0 for h in cfg.arch.hidden), "arch.hidden", "need positive widths")
    need(cfg.arch.n_freq >= 1, "arch.n_freq", "must be >= 1")
    need(cfg.loss.c is None or cfg.loss.c >= 0, "loss.c", "must be >= 0")
    need(cfg.loss.omega in ("unit", "dt-over-cout2"), "loss.omega", "unit or dt-over-cout2")
    need(cfg.loss.w_b >= 0, "loss.w_b", "must be >= 0")
    need(0 < cfg.loss.rho < 1, "loss.rho", "must lie in (0, 1)")
    need(cfg.time1.sigma > 0, "time1.sigma", "must be positive")
    need(cfg.noise.t_min < cfg.time1.lo < cfg.noise.T, "time1.lo", "must lie in (t_min, T)")
    need(cfg.time.kind in ("log-student-t", "lognormal"), "time.kind", "log-student-t or lognormal")
    need(cfg.time.sigma > 0, "time.sigma", "must be positive")
    need(cfg.time.nu > 0, "time.nu", "must be positive")
    need(cfg.noise.t_min < cfg.time.t_prime < cfg.noise.T, "time.t_prime", "must lie in (t_min, T)")
    need(cfg.schedule.base > 1, "schedule.base", "must be > 1")
    need(cfg.schedule.period >= 1, "schedule.period", "must be >= 1")
    need(0 < cfg.schedule.r_cap < 1, "schedule.r_cap", "must lie in (0, 1)")
    for sec in ("opt1", "opt2"):
        o = getattr(cfg, sec)
        need(o.lr > 0, f"{sec}.lr", "must be positive")
        need(o.kind in ("constant", "inv-sqrt"), f"{sec}.kind", "constant or inv-sqrt")
        need(o.t_ref >= 1, f"{sec}.t_ref", "must be >= 1")
    need(0 <= cfg.ema.beta < 1, "ema.beta", "must lie in [0, 1)")
    for key in ("batch1", "batch2"):
        need(getattr(cfg.train, key) >= 2, f"train.{key}", "must be >= 2")
    n_b = math.floor(cfg.train.batch2 * cfg.loss.rho)
    need(0 < n_b < cfg.train.batch2, "loss.rho", "floor(batch2 * rho) must leave both sub-batches nonempty")
    for key in ("iters1", "iters2", "ckpt_every", "eval_every"):
        need(getattr(cfg.train, key) >= 0, f"train.{key}", "must be >= 0")
    need(cfg.train.log_every >= 1, "train.log_every", "must be >= 1")
    need(cfg.train.grad_ceiling > 0, "train.grad_ceiling", "must be positive")
    need(cfg.train.patience >= 1, "train.patience", "must be >= 1")
    need(cfg.eval.n >= 2, "eval.n", "must be >= 2")
    need(all(cfg.noise.t_min <= t <= cfg.noise.T for t in cfg.eval.grid + cfg.eval.gap_grid),
         "eval.grid", "times must lie in [t_min, T]")
    need(cfg.eval.t_mid is None or cfg.noise.t_min <= cfg.eval.t_mid < cfg.noise.T, "eval.t_mid",
         "must lie in [t_min, T)")
    need(cfg.eval.gap_n >= 1, "eval.gap_n", "must be >= 1")
    if bad:
        raise ConfigError("; ".join(bad))


def dumps(cfg: TrainConfig) -> str:
    flat = to_flat(cfg)
    return "".join(f"{k}={flat[k]}\n" for k in sorted(flat))


def loads(text: str) -> TrainConfig:
    flat = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key=value")
            continue
        k, v = line.split("=", 1)
        k = k.strip()
        if k in flat:
            errors.append(f"line {lineno}: duplicate key {k}")
        flat[k] = v.strip()
    if errors:
        raise ConfigError("; ".join(errors))
    return from_flat(flat)


def load(path) -> TrainConfig:
    return loads(Path(path).read_text())


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()
