"""Acceptance criteria A1-A9.

Each test records one PASS/FAIL line (printed in the terminal summary) and then
asserts it.  The long training runs are shared through module fixtures:
three seeds of stage 1, stage 2 with the default boundary weight, and stage 2
with no boundary term.
"""
import math
import statistics
import time

import numpy as np
import pytest

from tcm.config import TrainConfig
from tcm.gradcheck import run_battery, small_net
from tcm.metrics import collapse_check, mode_counts, sample_onestep, sample_twostep, w2
from tcm.network import CollapsedNet, checkpoint_bytes, parse_checkpoint
from tcm.oracle import load_dataset, make_dataset, save_dataset
from tcm.oracle_checks import ct_cd_cosine, heun_ratios, marginal_w2, score_fd_error, semigroup_error
from tcm.rng import stream
from tcm.schedules import delta_t
from tcm.training import LossConfig, boundary_loss, ct_pair_loss, train_stage1, train_stage2

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
N_EVAL = 4096


@pytest.fixture(scope="module")
def data():
    cfg = TrainConfig()
    return make_dataset(cfg.data.name, cfg.data.n, cfg.data.d, cfg.data.seed, cfg.noise.sigma_data)


@pytest.fixture(scope="module")
def oracle_baseline(data):
    """Exact W2 of oracle PF ODE samples against fresh data, plus the data self-distance."""
    return marginal_w2(data, 0, N_EVAL)


def one_step_w2(params, data, seed):
    x = sample_onestep(params, N_EVAL, stream(seed, "acceptance/onestep"))
    return w2(x, data.sample(N_EVAL, stream(seed, "acceptance/ref")), "exact"), x


def two_step_w2(params, data, seed, t_mid):
    x = sample_twostep(params, N_EVAL, t_mid, stream(seed, "acceptance/onestep"))
    return w2(x, data.sample(N_EVAL, stream(seed, "acceptance/ref")), "exact")


@pytest.fixture(scope="module")
def runs(data):
    out = {}
    for seed in SEEDS:
        cfg = TrainConfig().override(**{"run.seed": seed})
        t0 = time.perf_counter()
        s1 = train_stage1(cfg, data)
        t1 = time.perf_counter()
        s2 = train_stage2(s1.checkpoint, cfg, data)
        t2 = time.perf_counter()
        s2_free = train_stage2(s1.checkpoint, cfg.override(**{"loss.w_b": 0.0}), data)
        t3 = time.perf_counter()
        out[seed] = dict(cfg=cfg, s1=s1, s2=s2, s2_free=s2_free, times=(t1 - t0, t2 - t1, t3 - t2))
    return out


def test_a1_gradient_battery(record):
    t0 = time.perf_counter()
    results = run_battery(points=100)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 60
    assert record("A1", ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e} (< 1e-5), "
                            f"{elapsed:.0f}s (< 60s)")


def test_a2_score_exactness(data, record):
    t0 = time.perf_counter()
    err = score_fd_error(data, n=1000)
    elapsed = time.perf_counter() - t0
    assert record("A2", err < 1e-6 and elapsed < 30, f"max rel err {err:.2e} (< 1e-6), {elapsed:.1f}s (< 30s)")


def test_a3_oracle_soundness(data, oracle_baseline, record):
    t0 = time.perf_counter()
    ratios = heun_ratios(data)
    semi = semigroup_error(data)
    gen, base = oracle_baseline
    elapsed = time.perf_counter() - t0
    heun_ok = all(3.2 <= r <= 4.8 for r in ratios)
    ok = heun_ok and semi < 1e-6 and gen <= 2 * base and elapsed < 300
    detail = (f"Heun ratios {', '.join(f'{r:.2f}' for r in ratios)} (in [3.2, 4.8]); semigroup {semi:.2e} "
              f"(< 1e-6); marginal W2 {gen:.4f} vs 2 x {base:.4f}")
    assert record("A3", ok, detail)


def test_a4_stage1_quality(data, oracle_baseline, runs, record):
    gen, _ = oracle_baseline
    scores, coverage = [], []
    for seed, run in runs.items():
        d, x = one_step_w2(run["s1"].checkpoint.eval_params, data, seed)
        scores.append(d)
        coverage.append(int((mode_counts(x, data.centers) / len(x) >= 0.02).sum()))
    med = statistics.median(scores)
    minutes = statistics.median(r["times"][0] for r in runs.values()) / 60
    ok = med <= 3 * gen and statistics.median(coverage) == 8
    detail = (f"median one-step W2 {med:.4f} vs 3 x {gen:.4f} = {3 * gen:.4f}; per seed "
              f"{', '.join(f'{s:.3f}' for s in scores)}; modes {coverage}; {minutes:.1f} min per run")
    assert record("A4", ok, detail)


def test_a5_tradeoff_directions(data, runs, record):
    rise, fall, better, worse = [], [], [], []
    for seed, run in runs.items():
        recs = run["s1"].records
        small = [r.dfid(0.2) for r in recs]
        rise.append(small[-1] - min(small))
        fall.append(recs[-1].dfid(80.0) - recs[0].dfid(80.0))
        s1_w2, _ = one_step_w2(run["s1"].checkpoint.eval_params, data, seed)
        s2_w2, _ = one_step_w2(run["s2"].checkpoint.eval_params, data, seed)
        better.append(s2_w2 - s1_w2)
        worse.append(run["s2"].records[-1].dfid(0.2) - recs[-1].dfid(0.2))
    med = statistics.median
    ok = med(rise) > 0 and med(fall) < 0 and med(better) < 0 and med(worse) > 0
    detail = (f"stage 1: dFID(0.2) final minus min {med(rise):+.4f}, dFID(80) change {med(fall):+.4f}; "
              f"stage 2 vs stage 1: one-step W2 {med(better):+.4f}, dFID(0.2) {med(worse):+.4f}")
    assert record("A5", ok, detail)


def test_a6_ct_cd_gradient_equivalence(data, record):
    cfg = LossConfig()
    t0 = time.perf_counter()
    coarse, fine = [], []
    for seed in SEEDS:
        net = small_net(seed)
        coarse.append(ct_cd_cosine(net, data, cfg, seed, t=2.0, dt_ratio=1e-2))
        fine.append(ct_cd_cosine(net, data, cfg, seed, t=2.0, dt_ratio=1e-3))
    elapsed = time.perf_counter() - t0
    c, f = statistics.median(coarse), statistics.median(fine)
    ok = c >= 0.9 and f > c and elapsed < 120
    detail = f"cosine 1 - {1 - c:.3e} at dt=1e-2 t, 1 - {1 - f:.3e} at dt=1e-3 t; {elapsed:.0f}s"
    assert record("A6", ok, detail)


def test_a7_collapse_mechanics(data, runs, record):
    cfg = LossConfig()
    net = CollapsedNet()
    x = data.sample(256, stream(0, "acceptance/collapse/x"))
    eps = stream(0, "acceptance/collapse/eps").standard_normal(x.shape)
    t = np.exp(stream(0, "acceptance/collapse/t").uniform(math.log(1.0), math.log(80.0), 256))
    cons = ct_pair_loss(net, net, x, eps, t, delta_t(t, 0.999), cfg)
    frozen = runs[0]["s1"].checkpoint.eval_params
    bound = boundary_loss(net, frozen, x, eps, 1.0, float(delta_t(1.0, 0.999)), cfg)
    part_a = cons == 0.0 and bound > 0.0

    collapsed, ratios = [], []
    for seed, run in runs.items():
        free = run["s2_free"].checkpoint.eval_params
        rep = collapse_check(free, run["s1"].checkpoint.eval_params, data, seed, N_EVAL)
        collapsed.append(rep.collapsed)
        ratios.append(one_step_w2(free, data, seed)[0] / one_step_w2(run["s2"].checkpoint.eval_params, data, seed)[0])
    n_collapsed = sum(collapsed)
    part_b = n_collapsed >= 2 or statistics.median(ratios) >= 1.5
    detail = (f"(a) consistency {cons:.1e}, boundary {bound:.3e}; (b) collapsed {n_collapsed}/3, "
              f"W2 ratio w_b=0 / w_b=0.1 median {statistics.median(ratios):.2f} (>= 1.5)")
    assert record("A7", part_a and part_b, detail)


def test_a8_two_step_ordering(data, runs, record):
    diffs = []
    for seed, run in runs.items():
        params = run["s2"].checkpoint.eval_params
        diffs.append(two_step_w2(params, data, seed, run["cfg"].t_mid) - one_step_w2(params, data, seed)[0])
    med = statistics.median(diffs)
    assert record("A8", med <= 0, f"median two-step minus one-step W2 {med:+.4f}")


def test_a9_determinism_and_persistence(data, tmp_path, record):
    tiny = {"arch.hidden": "16,16", "arch.n_freq": "4", "train.iters1": "40", "train.iters2": "20",
            "train.batch1": "32", "train.batch2": "32", "train.eval_every": "20", "eval.n": "64"}
    cfg = TrainConfig().override(**tiny)
    a, b = train_stage1(cfg, data), train_stage1(cfg, data)
    same_ckpt = checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)
    same_metrics = a.records == b.records
    raw = checkpoint_bytes(a.checkpoint)
    ckpt_trip = checkpoint_bytes(parse_checkpoint(raw)) == raw
    p1, p2 = tmp_path / "d1.txt", tmp_path / "d2.txt"
    save_dataset(p1, data)
    save_dataset(p2, load_dataset(p1))
    data_trip = p1.read_bytes() == p2.read_bytes()
    ok = same_ckpt and same_metrics and ckpt_trip and data_trip
    detail = (f"checkpoints identical {same_ckpt}, metrics identical {same_metrics}, "
              f"checkpoint round trip {ckpt_trip}, dataset round trip {data_trip}")
    assert record("A9", ok, detail)
