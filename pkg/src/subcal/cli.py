"""Command-line entry points.

Four subcommands:

* ``calibrate``: one subsampled calibration with confidence intervals.
* ``simulate``: a full replication study written to report files.
* ``probs``: dump scores and inclusion probabilities for audit.
* ``oracle``: check the threshold probabilities against an independent
  constrained solver on random instances.
"""

from __future__ import annotations

import argparse
import csv as _csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .emulator import PassThrough, fit_gp
from .errors import SubcalError
from .harness import (
    ExperimentConfig,
    _SYNTHETIC_DEFAULTS,
    _build_gen_config,
    default_r_grid,
    emit_report,
    run_experiment,
)
from .inference import confidence_intervals, estimate_variance
from .io import load_csv
from .models import generate_physical_data, get_model
from .oracle import bruteforce_probs, enumerate_probs, random_scores
from .sampling import (
    SamplingConfig,
    optimal_probs,
    pilot_stage,
    two_step,
    uniform_fit,
    weighted_prob,
)
from .util import make_rng


def _comma_list(text, cast):
    return tuple(cast(v) for v in str(text).split(",") if v != "")


def _load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _emulator_for(model, mode, m, seed):
    if mode == "gp":
        return fit_gp(model, m=m if m else 10 * (model.d + model.q), seed=make_rng(seed, 0))
    return PassThrough(model)


def _dataset(args, model):
    if args.csv:
        if not (args.x_cols and args.y_col):
            raise SystemExit("--csv requires --x-cols and --y-col")
        return load_csv(args.csv, _comma_list(args.x_cols, str), args.y_col)
    defaults = _SYNTHETIC_DEFAULTS.get(model.name, {})
    sigma = args.sigma if args.sigma is not None else defaults.get("sigma")
    if sigma is None:
        raise SystemExit(f"synthetic data for '{model.name}' needs --sigma")
    cfg = ExperimentConfig(model=model.name, r_grid=(1,), sigma=sigma, seed=args.seed)
    gen = _build_gen_config(cfg, model, _theta_star(args, model))
    gen = dataclasses.replace(gen, seed=np.random.SeedSequence(entropy=args.seed, spawn_key=(1, 0)))
    return generate_physical_data(gen, args.n)


def _theta_star(args, model):
    if getattr(args, "theta_star", None):
        return np.asarray(_comma_list(args.theta_star, float))
    if model.theta_star is not None:
        return np.asarray(model.theta_star, dtype=float)
    return None


def _cmd_calibrate(args) -> int:
    model = get_model(args.model)
    em = _emulator_for(model, args.emulator, args.m, args.seed)
    data = _dataset(args, model)
    scfg = SamplingConfig(
        criterion=args.criterion,
        r=args.r,
        r0=args.r0,
        rho=args.rho,
        include_pilot=args.include_pilot,
    )
    seed = np.random.SeedSequence(entropy=args.seed, spawn_key=(2, 0))
    if args.criterion == "uniform":
        est, sub = uniform_fit(data, em, scfg, seed)
        pilot = None
    else:
        result = two_step(data, em, scfg, seed)
        est, sub, pilot = result.estimate, result.subsample, result.pilot
    report = estimate_variance(sub, pilot, est, em, scfg)
    ci = confidence_intervals(est, report.cov, args.level)

    print(f"model:      {model.name}")
    print(f"criterion:  {args.criterion} (r={args.r:g}, realized {sub.realized_size})")
    print(f"loss:       {est.loss:.6g}  converged={est.converged}")
    for j, (th, (lo, hi)) in enumerate(zip(est.theta, ci)):
        print(f"theta[{j}]:   {th:.6f}  [{lo:.6f}, {hi:.6f}]")
    if args.out:
        payload = {
            "model": model.name,
            "criterion": args.criterion,
            "r": args.r,
            "theta": [float(v) for v in est.theta],
            "ci": [[float(lo), float(hi)] for lo, hi in ci],
            "cov": [[float(v) for v in row] for row in report.cov],
            "realized_size": sub.realized_size,
            "converged": bool(est.converged),
        }
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    merged = _load_config(args.config) if args.config else {}
    overrides = {
        "model": args.model,
        "seed": args.seed,
        "r0": args.r0,
        "rho": args.rho,
        "threads": args.threads,
        "emulator": args.emulator_flag,
        "m": args.m,
        "T": args.T,
        "n": args.n,
        "sigma": args.sigma,
    }
    for key, val in overrides.items():
        if val is not None:
            merged[key] = val
    if args.criterion:
        merged["criteria"] = _comma_list(args.criterion, str)
    if args.r:
        merged["r_grid"] = _comma_list(args.r, float)
    if "model" not in merged:
        raise SystemExit("simulate needs --model or a config file with one")
    if "r_grid" not in merged:
        merged["r_grid"] = default_r_grid(merged["model"])
    cfg = ExperimentConfig(**merged)
    report = run_experiment(cfg)
    paths = emit_report(report, args.out)
    print(f"{'criterion':>9} {'r':>6} {'ok':>4} {'rmse':>12} {'rmse_f':>12}")
    for row in report.rows:
        rmse = "-" if row["rmse"] is None else f"{row['rmse']:.4e}"
        rmse_f = "-" if row["rmse_f"] is None else f"{row['rmse_f']:.4e}"
        print(f"{row['criterion']:>9} {row['r']:>6g} {row['n_ok']:>4} {rmse:>12} {rmse_f:>12}")
    print(f"wrote {paths['report_json']}")
    return 0


def _cmd_probs(args) -> int:
    model = get_model(args.model)
    em = _emulator_for(model, args.emulator, args.m, args.seed)
    data = _dataset(args, model)
    scfg = SamplingConfig(criterion=args.criterion, r=args.r, r0=args.r0, rho=args.rho)
    if args.criterion == "uniform":
        size = args.r + scfg.pilot_size(em)
        pi = np.full(data.n, min(size / data.n, 1.0))
        scores = np.full(data.n, np.nan)
    else:
        pilot = pilot_stage(data, em, scfg, make_rng(args.seed, 2, 0, 0))
        rule = weighted_prob(pilot, em, args.r, args.rho)
        scores = np.concatenate(
            [
                rule(data.x[s : s + 8192], data.y[s : s + 8192], s)
                for s in range(0, data.n, 8192)
            ]
        )
        pi = np.minimum(scores, 1.0)
    with open(args.out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            ["index", *[f"x{j}" for j in range(data.x.shape[1])], "y", "raw_prob", "pi"]
        )
        for i in range(data.n):
            writer.writerow(
                [i, *[f"{v:.17g}" for v in data.x[i]], f"{data.y[i]:.17g}",
                 f"{scores[i]:.17g}", f"{pi[i]:.17g}"]
            )
    print(f"wrote {args.out} ({data.n} rows, criterion {args.criterion}, r={args.r:g})")
    return 0


def _cmd_oracle(args) -> int:
    worst = 0.0
    for trial in range(args.trials):
        h = random_scores(args.n, make_rng(args.seed, trial))
        fast = optimal_probs(h, args.r)
        try:
            slow = bruteforce_probs(h, args.r)
        except RuntimeError:
            slow = enumerate_probs(h, args.r)
        gap = float(np.max(np.abs(fast - slow)))
        worst = max(worst, gap)
        print(f"trial {trial}: max|fast - solver| = {gap:.3e}")
    status = "PASS" if worst <= args.tol else "FAIL"
    print(f"{status}: worst gap {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst <= args.tol else 1


def _add_common_data_flags(p):
    p.add_argument("--model", required=True, help="registered model name")
    p.add_argument("--csv", help="physical data CSV path (otherwise synthetic)")
    p.add_argument("--x-cols", help="comma-separated input column names for --csv")
    p.add_argument("--y-col", help="output column name for --csv")
    p.add_argument("--n", type=int, default=10000, help="synthetic sample size")
    p.add_argument("--sigma", type=float, default=None, help="synthetic noise level")
    p.add_argument("--theta-star", default=None, help="comma-separated process parameter")
    p.add_argument("--emulator", choices=("passthrough", "gp"), default="passthrough")
    p.add_argument("--m", type=int, default=None, help="emulator design size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subcal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="one subsampled calibration with intervals")
    _add_common_data_flags(p)
    p.add_argument("--criterion", choices=("uniform", "mv", "mvc"), default="mvc")
    p.add_argument("--r", type=float, default=300.0, help="expected subsample size")
    p.add_argument("--r0", type=int, default=None, help="pilot size (default 2q+10d)")
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument(
        "--include-pilot",
        action="store_true",
        help="merge pilot points into the final fit at their uniform weights",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=None, help="write the estimate as JSON")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("simulate", help="replication study with report files")
    p.add_argument("--config", help="JSON file of experiment settings")
    p.add_argument("--model", default=None)
    p.add_argument("--criterion", default=None, help="comma-separated criteria")
    p.add_argument("--r", default=None, help="comma-separated size grid")
    p.add_argument("--r0", type=int, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--emulator", dest="emulator_flag", choices=("passthrough", "gp"), default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default="subcal-report", help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("probs", help="dump scores and inclusion probabilities")
    _add_common_data_flags(p)
    p.add_argument("--criterion", choices=("uniform", "mv", "mvc"), default="mvc")
    p.add_argument("--r", type=float, default=300.0)
    p.add_argument("--r0", type=int, default=None)
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="probs.csv")
    p.set_defaults(func=_cmd_probs)

    p = sub.add_parser("oracle", help="audit threshold probabilities against a solver")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--r", type=float, default=8.0)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SubcalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
