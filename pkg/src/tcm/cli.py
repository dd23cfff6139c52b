"""Command-line entry point: ``tcm <subcommand> ...``.

Exit codes: 0 success, 1 failed check, 2 configuration or usage error,
3 divergence guard, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("tcm")


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("TCM_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise UsageError(f"TCM_THREADS must be an integer, got {raw!r}") from None


def _cap_blas_threads() -> None:
    """Must run before numpy is imported for the cap to reach the BLAS pool."""
    n = os.environ.get("TCM_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def _dataset(cfg):
    from .oracle import load_dataset, make_dataset

    if cfg.data.path:
        data = load_dataset(cfg.data.path)
        if data.sigma_data != cfg.noise.sigma_data:
            raise UsageError(f"dataset sigma_data {data.sigma_data} != noise.sigma_data {cfg.noise.sigma_data}")
        return data
    return make_dataset(cfg.data.name, cfg.data.n, cfg.data.d, cfg.data.seed, cfg.noise.sigma_data)


def _load_config(path, sets):
    from . import config

    cfg = config.load(path) if path else config.TrainConfig()
    if sets:
        pairs = {}
        for s in sets:
            if "=" not in s:
                raise UsageError(f"--set expects key=value, got {s!r}")
            k, v = s.split("=", 1)
            pairs[k.strip()] = v.strip()
        cfg = cfg.override(**pairs)
    return cfg


# gen-data --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .oracle import make_dataset, save_dataset

    data = make_dataset(args.name, args.n, args.d, args.seed, args.sigma_data)
    save_dataset(args.out, data)
    print(f"wrote {data.n} points (d={data.d}) to {args.out}")
    return EXIT_OK


# train -----------------------------------------------------------------------

def run_training(cfg, stage: int, out_dir, init_ckpt=None) -> dict:
    """Train one stage into ``out_dir`` and return the manifest (also written to disk)."""
    from . import __version__, config
    from .metrics import collapse_check, mode_coverage, record_rows, sample_onestep, write_report
    from .network import load_checkpoint, save_checkpoint
    from .rng import stream
    from .training import LOG_FIELDS, DivergenceError, noise_of, train_stage1, train_stage2

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset(cfg)
    (out / "config.txt").write_text(config.dumps(cfg))
    manifest = dict(config_hash=config.config_hash(cfg), version=__version__, stage=stage,
                    started=_now(), finished=None, status="running", checkpoints=[], final_metrics={})
    man_path = out / f"manifest_stage{stage}.json"
    init = None
    if stage == 2:
        if init_ckpt is None:
            raise UsageError("stage 2 needs --init-ckpt (the stage-1 checkpoint)")
        init = load_checkpoint(init_ckpt)
        manifest["init_ckpt"] = str(init_ckpt)
    try:
        result = train_stage1(cfg, data) if stage == 1 else train_stage2(init, cfg, data)
    except DivergenceError as exc:
        manifest.update(status="diverged", finished=_now(), error=str(exc), diverged_at=exc.iteration)
        man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        raise
    ckpt_path = out / f"stage{stage}.ckpt"
    save_checkpoint(ckpt_path, result.checkpoint)
    _write_csv(out / f"metrics_stage{stage}.csv", LOG_FIELDS, result.log)
    rows = []
    for rec in result.records:
        rows += record_rows(f"stage{stage}", rec, cfg.seed, cfg.noise.T)
    write_report(out / f"eval_stage{stage}.csv", rows)

    final = dict(iteration=result.checkpoint.meta["iteration"])
    if result.records:
        rec = result.records[-1]
        final.update(one_step_w2=rec.one_step_div, two_step_w2=rec.two_step_div,
                     dfid={repr(t): v for t, v in rec.dfid_grid})
    model = result.checkpoint.eval_params
    if data.centers is not None:
        samples = sample_onestep(model, cfg.eval.n, stream(cfg.seed, "eval/coverage"), noise_of(cfg), data.d)
        final["mode_coverage"] = mode_coverage(samples, data.centers)
    if init is not None:
        rep = collapse_check(model, init.eval_params, data, cfg.seed, cfg.eval.n, noise_of(cfg))
        final.update(variance_ratio=rep.variance_ratio, collapsed=rep.collapsed)
    manifest.update(status="ok", finished=_now(), checkpoints=[str(ckpt_path)], final_metrics=final)
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_train(args) -> int:
    if args.stage == 2 and not args.init_ckpt:
        raise UsageError("stage 2 needs --init-ckpt (the stage-1 checkpoint)")
    cfg = _load_config(args.config, args.set)
    manifest = run_training(cfg, args.stage, args.out, args.init_ckpt)
    print(json.dumps(manifest["final_metrics"], sort_keys=True))
    return EXIT_OK


# eval / sample ---------------------------------------------------------------

def _oracle_model(data, steps):
    from .oracle import oracle_endpoint

    return lambda x, t: oracle_endpoint(x, float(t[0]), data, steps)


def cmd_eval(args) -> int:
    from .metrics import (DEFAULT_GRID, denoising_divergence, evaluate, oracle_gap, record_rows,
                          sample_onestep, sample_twostep, w2, write_report)
    from .network import load_checkpoint
    from .oracle import NoiseSpec, load_dataset
    from .rng import stream

    data = load_dataset(args.data)
    spec = NoiseSpec(sigma_data=data.sigma_data)
    grid = tuple(args.grid) if args.grid else DEFAULT_GRID
    models = []
    if args.oracle:
        models.append(("oracle", _oracle_model(data, args.steps), 0))
    for path in args.ckpt or ():
        ck = load_checkpoint(path)
        if ck.eval_params.sigma_data != data.sigma_data:
            raise UsageError(f"{path}: checkpoint sigma_data {ck.eval_params.sigma_data} "
                             f"does not match dataset sigma_data {data.sigma_data}")
        models.append((Path(path).stem, ck.eval_params, int(ck.meta.get("iteration", 0))))
    if not models:
        raise UsageError("give at least one --ckpt or --oracle")
    if args.what == "tradeoff" and len(models) < 2:
        raise UsageError("tradeoff needs at least two checkpoints")

    rows = []
    ref = data.sample(args.n, stream(args.seed, "eval/reference"))
    for label, model, it in models:
        base = dict(ckpt=label, iter=it, n=args.n, seed=args.seed)
        if args.what == "onestep":
            one = sample_onestep(model, args.n, stream(args.seed, "eval/onestep"), spec, data.d)
            rows.append(dict(base, t=spec.T, metric="one_step_w2", value=w2(one, ref)))
        elif args.what == "twostep":
            two = sample_twostep(model, args.n, args.t_mid, stream(args.seed, "eval/twostep"), spec, data.d)
            rows.append(dict(base, t=spec.T, metric="two_step_w2", value=w2(two, ref)))
        elif args.what == "dfid":
            for i, t in enumerate(sorted(grid)):
                v = denoising_divergence(model, t, data, args.n, stream(args.seed, "eval/dfid", i))
                rows.append(dict(base, t=float(t), metric="dfid_w2", value=v))
        elif args.what == "gap":
            for i, t in enumerate(sorted(grid)):
                v = oracle_gap(model, t, data, args.n, stream(args.seed, "eval/gap", i), args.steps, spec.t_min)
                rows.append(dict(base, t=float(t), metric="oracle_gap", value=v))
        else:
            rec = evaluate(model, data, args.seed, it, args.n, grid, args.t_mid, spec=spec)
            rows += record_rows(label, rec, args.seed, spec.T)
    rows = [{k: r[k] for k in ("ckpt", "iter", "t", "metric", "value", "n", "seed")} for r in rows]
    write_report(args.out, rows)
    for r in rows:
        print(f"{r['ckpt']:<16} {r['metric']:<12} t={r['t']:<6g} {r['value']:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .metrics import sample_onestep, sample_twostep
    from .network import load_checkpoint
    from .oracle import NoiseSpec, load_dataset, oracle_sample, write_points
    from .rng import stream

    rng = stream(args.seed, "sample")
    if args.oracle:
        if not args.data:
            raise UsageError("--oracle sampling needs --data")
        data = load_dataset(args.data)
        pts = oracle_sample(args.n, data, rng, args.steps_ode, NoiseSpec(sigma_data=data.sigma_data))
        sigma = data.sigma_data
    else:
        if not args.ckpt:
            raise UsageError("give --ckpt or --oracle")
        model = load_checkpoint(args.ckpt).eval_params
        sigma = model.sigma_data
        spec = NoiseSpec(sigma_data=sigma)
        if args.steps == 1:
            pts = sample_onestep(model, args.n, rng, spec, model.arch.d)
        else:
            pts = sample_twostep(model, args.n, args.t_mid, rng, spec, model.arch.d)
    write_points(args.out, pts, sigma, kind="tcm-samples")
    print(f"wrote {len(pts)} samples to {args.out}")
    return EXIT_OK


# sweep -----------------------------------------------------------------------

SWEEP_FIELDS = ("value", "run_dir", "status", "exit_code", "one_step_w2", "two_step_w2", "mode_coverage",
                "collapsed")


def _sweep_one(job) -> dict:
    cfg_text, param, value, run_dir, stages, init_ckpt = job
    from . import config
    from .training import DivergenceError

    row = dict(value=value, run_dir=run_dir, status="ok", exit_code=EXIT_OK, one_step_w2="",
               two_step_w2="", mode_coverage="", collapsed="")
    try:
        cfg = config.loads(cfg_text).override(**{param: value})
        manifest = None
        for stage in stages:
            if stage == 2 and init_ckpt is None:
                init_ckpt = str(Path(run_dir) / "stage1.ckpt")
            manifest = run_training(cfg, stage, run_dir, init_ckpt if stage == 2 else None)
        final = manifest["final_metrics"]
        for k in ("one_step_w2", "two_step_w2", "mode_coverage", "collapsed"):
            row[k] = final.get(k, "")
    except DivergenceError as exc:
        row.update(status=f"diverged@{exc.iteration}", exit_code=EXIT_DIVERGED)
    except (config.ConfigError, UsageError) as exc:
        row.update(status=f"config error: {exc}", exit_code=EXIT_CONFIG)
    except (FloatingPointError, ArithmeticError) as exc:
        row.update(status=f"numeric error: {exc}", exit_code=EXIT_NUMERIC)
    return row


def cmd_sweep(args) -> int:
    from . import config

    if not args.values:
        raise UsageError("sweep needs at least one value")
    if args.param not in config.keys():
        raise UsageError(f"unknown config key {args.param}")
    if not config.is_scalar_key(args.param):
        raise UsageError(f"{args.param} is not a scalar config field")
    if args.stage == "2" and not args.init_ckpt:
        raise UsageError("a stage-2 sweep needs --init-ckpt")
    cfg = _load_config(args.config, args.set)
    for v in args.values:  # validate every value before running anything
        cfg.override(**{args.param: v})
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(config.dumps(cfg), args.param, v, str(out / f"{args.param}={v}"), stages, args.init_ckpt)
            for v in args.values]
    workers = min(args.jobs, _threads() if os.environ.get("TCM_THREADS") else args.jobs, len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    _write_csv(out / "summary.csv", SWEEP_FIELDS, rows)
    for r in rows:
        print(f"{args.param}={r['value']:<10} {r['status']:<14} one-step W2 {r['one_step_w2']}")
    return EXIT_OK


# checks ----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_battery

    results = run_battery(args.points, args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_oracle_check(args) -> int:
    from .oracle import load_dataset, make_dataset
    from .oracle_checks import format_checks, run_oracle_checks

    data = load_dataset(args.data) if args.data else make_dataset(args.name, args.n, seed=args.data_seed)
    results = run_oracle_checks(data, args.seed, n_samples=args.samples)
    print(format_checks(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a normalized synthetic dataset")
    g.add_argument("--name", default="ring8")
    g.add_argument("--n", type=int, default=2048)
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--sigma-data", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1 or stage 2 training")
    t.add_argument("--config", help="key=value config file (defaults if omitted)")
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--init-ckpt", help="stage-1 checkpoint (required for stage 2)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write a metric report CSV")
    e.add_argument("--ckpt", nargs="*")
    e.add_argument("--oracle", action="store_true", help="also evaluate the exact PF-ODE endpoint map")
    e.add_argument("--data", required=True)
    e.add_argument("--what", choices=("onestep", "twostep", "dfid", "gap", "tradeoff"), default="dfid")
    e.add_argument("--grid", type=float, nargs="*")
    e.add_argument("--n", type=int, default=2048)
    e.add_argument("--t-mid", type=float, default=1.0)
    e.add_argument("--steps", type=int, default=400, help="Heun steps for oracle endpoints")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="dump generated samples")
    s.add_argument("--ckpt")
    s.add_argument("--oracle", action="store_true", help="sample with the exact PF-ODE instead")
    s.add_argument("--data")
    s.add_argument("--n", type=int, default=4096)
    s.add_argument("--steps", type=int, choices=(1, 2), default=1)
    s.add_argument("--steps-ode", type=int, default=128)
    s.add_argument("--t-mid", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", help="train once per value of one config key")
    w.add_argument("--config")
    w.add_argument("--param", required=True)
    w.add_argument("--values", nargs="*", default=[])
    w.add_argument("--stage", choices=("1", "2", "both"), default="1")
    w.add_argument("--init-ckpt")
    w.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    w.add_argument("--jobs", type=int, default=1, help="parallel isolated processes")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    c.add_argument("--points", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    o = sub.add_parser("oracle-check", help="self-checks of the exact-score oracle")
    o.add_argument("--data")
    o.add_argument("--name", default="ring8")
    o.add_argument("--n", type=int, default=2048)
    o.add_argument("--data-seed", type=int, default=7)
    o.add_argument("--samples", type=int, default=4096)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    _cap_blas_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")

    from .schedules import ConfigError, SamplingError
    from .training import DivergenceError, ScheduleError

    try:
        return args.func(args)
    except (UsageError, ConfigError, ScheduleError) as exc:
        print(f"tcm {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"tcm {args.command}: divergence guard tripped: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FloatingPointError, ArithmeticError, SamplingError) as exc:
        print(f"tcm {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"tcm {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
