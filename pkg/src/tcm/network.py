"""Consistency function: a time-conditioned MLP behind the EDM skip parameterization.

``f(x, t) = c_out(t) * F(c_in(t) x, features(t)) + c_skip(t) * x``.  The
coefficients pin ``f(x, 0) = x`` whatever the network computes.  The
truncated variant routes times below the dividing time to a frozen copy.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .oracle import SIGMA_DATA
from .rng import stream

CKPT_MAGIC = "tcm-ckpt v1"


def c_skip(t, sigma_data: float = SIGMA_DATA):
    t = np.asarray(t, dtype=np.float64)
    return sigma_data ** 2 / (sigma_data ** 2 + t ** 2)


def c_out(t, sigma_data: float = SIGMA_DATA):
    t = np.asarray(t, dtype=np.float64)
    return t * sigma_data / np.sqrt(sigma_data ** 2 + t ** 2)


def c_in(t, sigma_data: float = SIGMA_DATA):
    t = np.asarray(t, dtype=np.float64)
    return 1.0 / np.sqrt(sigma_data ** 2 + t ** 2)


@dataclass(frozen=True)
class Arch:
    d: int = 2
    hidden: tuple[int, ...] = (128, 128, 128)
    n_freq: int = 32
    fourier_scale: float = 0.25

    @property
    def time_features(self) -> int:
        return 2 * self.n_freq


@dataclass(frozen=True, eq=False)
class CmParams:
    """Trainable weights (``w0, b0, w1, b1, ...``) plus frozen Fourier frequencies."""

    arch: Arch
    arrays: dict[str, np.ndarray]
    freqs: np.ndarray
    sigma_data: float = SIGMA_DATA

    @property
    def n_layers(self) -> int:
        return len(self.arch.hidden) + 1

    def names(self) -> list[str]:
        return [f"{kind}{i}" for i in range(self.n_layers) for kind in ("w", "b")]

    def bind(self, tape: ad.Tape) -> dict[str, ad.Node]:
        return {k: tape.param(self.arrays[k], name=k) for k in self.names()}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "CmParams":
        return replace(self, arrays={k: np.asarray(arrays[k], dtype=np.float64) for k in self.names()})

    def copy(self) -> "CmParams":
        return self.with_arrays({k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def equals(self, other: "CmParams") -> bool:
        return (self.arch == other.arch and self.sigma_data == other.sigma_data
                and np.array_equal(self.freqs, other.freqs)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.names()))


def init_params(seed: int, arch: Arch = Arch(), sigma_data: float = SIGMA_DATA) -> CmParams:
    """He-normal hidden layers, zero output layer, N(0, scale^2) Fourier frequencies."""
    rng = stream(seed, "init")
    freqs = arch.fourier_scale * rng.standard_normal(arch.n_freq)
    widths = [arch.d + arch.time_features, *arch.hidden, arch.d]
    arrays = {}
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == last:
            arrays[f"w{i}"] = np.zeros((fan_in, fan_out))
        else:
            arrays[f"w{i}"] = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        arrays[f"b{i}"] = np.zeros(fan_out)
    return CmParams(arch, arrays, freqs, sigma_data)


def time_features(t: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    phase = 2.0 * np.pi * np.log(t)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def _batch(x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ad.DimensionError(f"expected a (batch, d) array, got shape {x.shape}")
    t = np.asarray(t, dtype=np.float64)
    t = np.full(x.shape[0], float(t)) if t.ndim == 0 else t.reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ad.DimensionError(f"{x.shape[0]} points but {t.shape[0]} times")
    if np.any(t < 0):
        raise ValueError("times must be nonnegative")
    return x, t


def _mlp(params: CmParams, nodes, tape: ad.Tape, x: np.ndarray, t: np.ndarray) -> ad.Node:
    if x.shape[1] != params.arch.d:
        raise ad.DimensionError(f"model expects d={params.arch.d}, got {x.shape[1]}")
    # t = 0 rows are multiplied by c_out(0) = 0; feed them a dummy time
    t_net = np.where(t > 0, t, 1.0)
    inp = np.concatenate([x * c_in(t_net, params.sigma_data)[:, None], time_features(t_net, params.freqs)], axis=1)
    h = tape.const(inp)
    for i in range(params.n_layers):
        h = ad.add_bias(ad.matmul(h, nodes[f"w{i}"]), nodes[f"b{i}"])
        if i < params.n_layers - 1:
            h = ad.silu(h)
    return h


def _consts(params: CmParams, tape: ad.Tape) -> dict[str, ad.Node]:
    return {k: tape.const(v) for k, v in params.arrays.items()}


def raw_forward(params: CmParams, x, t, nodes: dict[str, ad.Node] | None = None):
    """The free-form network F.  Returns a Node when ``nodes`` (bound params) is given."""
    x, t = _batch(x, t)
    if nodes is None:
        tape = ad.Tape()
        return _mlp(params, _consts(params, tape), tape, x, t).value
    tape = next(iter(nodes.values())).tape
    return _mlp(params, nodes, tape, x, t)


def cm_forward(params: CmParams, x, t, nodes: dict[str, ad.Node] | None = None):
    """``c_out(t) F(x, t) + c_skip(t) x``.  Returns a Node when ``nodes`` is given."""
    x, t = _batch(x, t)
    skip = c_skip(t, params.sigma_data)[:, None] * x
    if nodes is None:
        tape = ad.Tape()
        raw = _mlp(params, _consts(params, tape), tape, x, t).value
        return c_out(t, params.sigma_data)[:, None] * raw + skip
    tape = next(iter(nodes.values())).tape
    raw = _mlp(params, nodes, tape, x, t)
    return ad.add(ad.mul_rows(raw, c_out(t, params.sigma_data)), skip)


@dataclass(frozen=True, eq=False)
class TruncPair:
    """Student used for ``t >= t_prime``; frozen first-stage model below it."""

    student: CmParams
    frozen: CmParams
    t_prime: float = 1.0


def trunc_forward(pair: TruncPair, x, t, nodes: dict[str, ad.Node] | None = None):
    """Row-wise splice of the student (t >= t') and the stop-gradient frozen model (t < t')."""
    x, t = _batch(x, t)
    upper = t >= pair.t_prime
    if nodes is None:
        out = np.empty_like(x)
        if upper.any():
            out[upper] = cm_forward(pair.student, x[upper], t[upper])
        if (~upper).any():
            out[~upper] = cm_forward(pair.frozen, x[~upper], t[~upper])
        return out
    student = cm_forward(pair.student, x, t, nodes)
    frozen = cm_forward(pair.frozen, x, t)
    return ad.select_rows(upper, student, frozen)


class CollapsedNet:
    """The adversarial network F(x, t) = -c_skip(t) x / c_out(t), which makes f identically 0.

    Built from tape primitives so its outputs can sit inside the real losses.
    """

    def __init__(self, sigma_data: float = SIGMA_DATA):
        self.sigma_data = sigma_data

    def raw(self, x, t):
        x, t = _batch(x, t)
        return -(c_skip(t, self.sigma_data) / c_out(t, self.sigma_data))[:, None] * x

    def __call__(self, x, t):
        x, t = _batch(x, t)
        return c_out(t, self.sigma_data)[:, None] * self.raw(x, t) + c_skip(t, self.sigma_data)[:, None] * x


# checkpoints -----------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    params: CmParams
    ema: CmParams | None = None
    meta: dict = field(default_factory=dict)

    @property
    def eval_params(self) -> CmParams:
        return self.ema if self.ema is not None else self.params


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _write_array(buf: list, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    buf.append(struct.pack("<I", a.ndim))
    buf.append(struct.pack(f"<{a.ndim}q", *a.shape))
    buf.append(a.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    head = {
        "d": p.arch.d,
        "hidden": p.arch.hidden,
        "n_freq": p.arch.n_freq,
        "fourier_scale": float(p.arch.fourier_scale),
        "sigma_data": float(p.sigma_data),
        "has_ema": int(ckpt.ema is not None),
    }
    for k in sorted(ckpt.meta):
        if k in head:
            raise ValueError(f"meta key {k!r} collides with architecture metadata")
        head[k] = ckpt.meta[k]
    for k, v in head.items():
        if "\n" in _fmt(v) or "=" in k:
            raise ValueError(f"cannot encode checkpoint field {k!r}")
    text = CKPT_MAGIC + "\n" + "".join(f"{k}={_fmt(v)}\n" for k, v in head.items()) + "end\n"
    buf = [text.encode("utf-8")]
    groups = [p] + ([ckpt.ema] if ckpt.ema is not None else [])
    _write_array(buf, p.freqs)
    for g in groups:
        for name in g.names():
            _write_array(buf, g.arrays[name])
    return b"".join(buf)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _parse_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def parse_checkpoint(raw: bytes) -> Checkpoint:
    end = raw.find(b"\nend\n")
    if not raw.startswith(CKPT_MAGIC.encode() + b"\n") or end < 0:
        raise ValueError("not a tcm-ckpt v1 file")
    lines = raw[: end].decode("utf-8").split("\n")[1:]
    head = dict(line.split("=", 1) for line in lines)
    pos = end + len(b"\nend\n")

    def read_array():
        nonlocal pos
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        return a

    arch = Arch(
        d=int(head.pop("d")),
        hidden=tuple(int(h) for h in head.pop("hidden").split(",")),
        n_freq=int(head.pop("n_freq")),
        fourier_scale=float(head.pop("fourier_scale")),
    )
    sigma = float(head.pop("sigma_data"))
    has_ema = bool(int(head.pop("has_ema")))
    freqs = read_array()
    names = CmParams(arch, {}, freqs, sigma).names()
    params = CmParams(arch, {n: read_array() for n in names}, freqs, sigma)
    ema = CmParams(arch, {n: read_array() for n in names}, freqs, sigma) if has_ema else None
    if pos != len(raw):
        raise ValueError("trailing bytes after checkpoint arrays")
    meta = {k: _parse_value(v) for k, v in head.items()}
    return Checkpoint(params, ema, meta)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
