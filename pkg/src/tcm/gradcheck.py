"""Finite-difference battery over every tape primitive and every training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .network import Arch, CmParams, TruncPair, init_params
from .oracle import make_dataset
from .rng import stream
from .schedules import delta_t
from .training import LossConfig, boundary_loss, cd_pair_loss, ct_pair_loss, pseudo_huber, tcm_step_loss

THRESHOLD = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    kind: str
    max_rel_error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _primitive_cases(ops) -> dict[str, tuple[dict, Callable]]:
    """name -> (parameter shapes, builder(tape, nodes, rng-fixed consts) -> node)."""
    m, k, n = 4, 3, 2
    return {
        "matmul": ({"a": (m, k), "b": (k, n)}, lambda nd: ops["matmul"](nd["a"], nd["b"])),
        "add": ({"a": (m, k), "b": (m, k)}, lambda nd: ops["add"](nd["a"], nd["b"])),
        "sub": ({"a": (m, k), "b": (m, k)}, lambda nd: ops["sub"](nd["a"], nd["b"])),
        "mul": ({"a": (m, k), "b": (m, k)}, lambda nd: ops["mul"](nd["a"], nd["b"])),
        "mul_scalar": ({"a": (m, k), "s": ()}, lambda nd: ops["mul"](nd["s"], nd["a"])),
        "scale": ({"a": (m, k)}, lambda nd: ops["scale"](nd["a"], -1.7)),
        "square": ({"a": (m, k)}, lambda nd: ops["square"](nd["a"])),
        "sqrt": ({"a": (m, k)}, lambda nd: ops["sqrt"](ops["add"](ops["square"](nd["a"]), 0.5))),
        "silu": ({"a": (m, k)}, lambda nd: ops["silu"](nd["a"])),
        "tanh": ({"a": (m, k)}, lambda nd: ops["tanh"](nd["a"])),
        "add_bias": ({"a": (m, k), "b": (k,)}, lambda nd: ops["add_bias"](nd["a"], nd["b"])),
        "mul_rows": ({"a": (m, k), "c": (m,)}, lambda nd: ops["mul_rows"](nd["a"], nd["c"])),
        "sum_rows": ({"a": (m, k)}, lambda nd: ops["sum_rows"](nd["a"])),
        "sum_all": ({"a": (m, k)}, lambda nd: ops["sum_all"](nd["a"])),
        "mean": ({"a": (m, k)}, lambda nd: ops["mean"](nd["a"])),
        "concat": ({"a": (m, k), "b": (m, n)}, lambda nd: ops["concat"]([nd["a"], nd["b"]], axis=1)),
        "select_rows": ({"a": (m, k), "b": (m, k)},
                        lambda nd: ops["select_rows"](np.array([True, False, True, False]), nd["a"], nd["b"])),
    }


DEFAULT_OPS = {name: getattr(ad, name) for name in (
    "matmul", "add", "sub", "mul", "scale", "square", "sqrt", "silu", "tanh", "add_bias",
    "mul_rows", "sum_rows", "sum_all", "mean", "concat", "select_rows")}


def check_primitives(points: int = 100, seed: int = 0, ops=None) -> list[CheckResult]:
    """Each primitive is contracted with fixed random weights to a scalar and checked."""
    ops = {**DEFAULT_OPS, **(ops or {})}
    results = []
    for name, (shapes, build) in _primitive_cases(ops).items():
        rng = stream(seed, f"gradcheck/{name}")
        worst = 0.0
        for _ in range(points):
            params = {k: rng.standard_normal(s) for k, s in shapes.items()}
            probe = None

            def f(tape, nd):
                nonlocal probe
                out = build(nd)
                if probe is None:
                    probe = stream(seed, f"gradcheck/{name}/probe").standard_normal(out.shape)
                return ad.sum_all(ad.mul(out, probe)) if out.shape else out

            worst = max(worst, ad.grad_check(f, params, STEP))
        results.append(CheckResult(name, "primitive", worst, points))
    return results


def small_net(seed: int) -> CmParams:
    """Two-layer net with every weight random (including the usually-zero output layer)."""
    base = init_params(seed, Arch(d=2, hidden=(4,), n_freq=2))
    rng = stream(seed, "gradcheck/net")
    arrays = {k: 0.5 * rng.standard_normal(v.shape) for k, v in base.arrays.items()}
    return base.with_arrays(arrays)


def _loss_cases(cfg: LossConfig, data, batch: int = 8):
    """name -> builder(student_params, frozen_params, rng) -> f(tape, nodes)."""

    def huber(student, frozen, rng):
        from .network import cm_forward
        x = rng.standard_normal((batch, 2))
        t = np.exp(rng.uniform(np.log(0.01), np.log(80.0), batch))
        target = rng.standard_normal((batch, 2))
        return lambda tape, nd: ad.mean(pseudo_huber(cm_forward(student, x, t, nd), target, cfg.c))

    def ct(student, frozen, rng):
        x = data.sample(batch, rng)
        eps = rng.standard_normal((batch, 2))
        t = np.exp(rng.uniform(np.log(0.01), np.log(80.0), batch))
        dt = delta_t(t, 0.9, cfg.t_min)
        return lambda tape, nd: ct_pair_loss(student, student, x, eps, t, dt, cfg, nd)

    def cd(student, frozen, rng):
        x_t = data.sample(batch, rng) + 2.0 * rng.standard_normal((batch, 2))
        t = np.full(batch, 2.0)
        return lambda tape, nd: cd_pair_loss(student, student, x_t, t, 0.1, data, cfg, nd)

    def boundary(student, frozen, rng):
        x = data.sample(batch, rng)
        eps = rng.standard_normal((batch, 2))
        return lambda tape, nd: boundary_loss(student, frozen, x, eps, 1.0, float(delta_t(1.0, 0.9)), cfg, nd)

    def tcm(student, frozen, rng):
        x = data.sample(batch, rng)
        eps = rng.standard_normal((batch, 2))
        n_c = batch - int(batch * cfg.rho)
        t_cons = np.exp(rng.uniform(0.01, np.log(80.0), n_c))
        pair = TruncPair(student, frozen, 1.0)
        return lambda tape, nd: tcm_step_loss(pair, x, eps, t_cons, 0.9, cfg, nd).total

    return {"pseudo_huber": huber, "ct_pair_loss": ct, "cd_pair_loss": cd,
            "boundary_loss": boundary, "tcm_step_loss": tcm}


def check_losses(points: int = 100, seed: int = 0) -> list[CheckResult]:
    """Gradients of every loss w.r.t. the student weights of a small two-layer net."""
    cfg = LossConfig(c=0.03 * np.sqrt(2), w_b=0.1, rho=0.25)
    data = make_dataset("ring8", 64, seed=seed)
    results = []
    for name, make in _loss_cases(cfg, data).items():
        worst = 0.0
        for p in range(points):
            student = small_net(seed * 1000 + 2 * p)
            frozen = small_net(seed * 1000 + 2 * p + 1)
            f = make(student, frozen, stream(seed, f"gradcheck/{name}", p))

            def wrapped(tape, nd, f=f, student=student):
                bound = {k: nd[k] for k in student.names()}
                return f(tape, bound)

            worst = max(worst, ad.grad_check(wrapped, dict(student.arrays), STEP))
        results.append(CheckResult(name, "loss", worst, points))
    return results


def run_battery(points: int = 100, seed: int = 0, ops=None) -> list[CheckResult]:
    return check_primitives(points, seed, ops) + check_losses(points, seed)


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<16} {'kind':<10} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<16} {r.kind:<10} {r.max_rel_error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
