"""Replication studies comparing subsampling criteria.

One experiment fixes a model, an emulator mode, and a grid of expected
subsample sizes, then repeats the whole pipeline ``T`` times per
(criterion, size) cell: fresh synthetic data per replication (or a fixed CSV
dataset), a subsampled fit, and confidence intervals.  Aggregates follow the
usual massive-calibration benchmarks: the normalized error
``sum_j ((theta_j - theta*_j)/theta*_j)^2`` averaged over replications, the
same against the full-data estimate, CI lengths and coverage, and mean
estimation time.

Randomness is organized so results are reproducible and stable under
extension: data streams depend on (seed, t), estimation streams on
(seed, t, criterion, size, attempt), so growing ``T`` or adding criteria
never perturbs existing replications.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .calibrate import FitOptions, fit_ols
from .emulator import PassThrough, fit_gp
from .errors import SubcalError
from .inference import confidence_intervals, estimate_variance
from .io import load_csv
from .models import (
    GenConfig,
    PhysicalData,
    _ProcessAt,
    example2_process,
    generate_physical_data,
    get_model,
)
from .sampling import SamplingConfig, two_step, uniform_fit

SCHEMA_VERSION = 1

# Benchmark settings for the bundled models: noise level, reference parameter,
# the real process behind the synthetic data, and the usual size grid.
_SYNTHETIC_DEFAULTS = {
    "example1": {"sigma": 0.2, "r_grid": (100, 200, 300, 400, 600), "process": "model"},
    "example2": {"sigma": 0.1, "r_grid": (400, 500, 600, 800, 900), "process": "true"},
}


def default_r_grid(model_name: str) -> tuple:
    try:
        return tuple(_SYNTHETIC_DEFAULTS[model_name]["r_grid"])
    except KeyError:
        raise KeyError(f"no default size grid for model '{model_name}'") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of a replication study.

    Synthetic mode needs ``sigma`` and ``theta_star`` (both default from the
    bundled benchmarks when available); CSV mode needs ``csv_path``,
    ``csv_x``, ``csv_y`` and skips coverage and the normalized error.
    """

    model: str
    r_grid: tuple
    criteria: tuple = ("uniform", "mv", "mvc")
    T: int = 100
    n: int = 10000
    sigma: Optional[float] = None
    theta_star: Optional[tuple] = None
    seed: int = 0
    r0: Optional[int] = None
    rho: float = 0.2
    include_pilot: bool = False
    emulator: str = "passthrough"
    m: Optional[int] = None
    csv_path: Optional[str] = None
    csv_x: Optional[tuple] = None
    csv_y: Optional[str] = None
    ci_level: float = 0.95
    threads: int = 1
    keep_estimates: bool = False
    compute_rmse_f: Optional[bool] = None
    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iters: int = 500
    n_starts: int = 5
    gauss_newton: bool = False

    def __post_init__(self):
        object.__setattr__(self, "r_grid", tuple(self.r_grid))
        object.__setattr__(self, "criteria", tuple(self.criteria))
        if self.theta_star is not None:
            object.__setattr__(self, "theta_star", tuple(float(v) for v in self.theta_star))
        if self.csv_x is not None:
            object.__setattr__(self, "csv_x", tuple(self.csv_x))
        for c in self.criteria:
            if c not in ("uniform", "mv", "mvc"):
                raise ValueError(f"unknown criterion '{c}'")
        if self.emulator not in ("passthrough", "gp"):
            raise ValueError(f"unknown emulator mode '{self.emulator}'")
        if self.T < 1:
            raise ValueError("T must be at least 1")

    def fit_options(self) -> FitOptions:
        return FitOptions(
            gtol=self.gtol,
            xtol=self.xtol,
            max_iters=self.max_iters,
            n_starts=self.n_starts,
            gauss_newton=self.gauss_newton,
        )


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated experiment results.

    ``rows`` holds one dict per (criterion, r) cell.  Wall-clock means are
    kept separately from the deterministic payload because timings are
    hardware facts, not reproducible results.
    """

    config: dict
    rows: list
    schema_version: int = SCHEMA_VERSION

    def deterministic_payload(self) -> dict:
        rows = []
        for row in self.rows:
            row = dict(row)
            row.pop("mean_seconds", None)
            rows.append(row)
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "rows": rows,
        }

    def timing_payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "rows": [
                {
                    "criterion": row["criterion"],
                    "r": row["r"],
                    "mean_seconds": row["mean_seconds"],
                }
                for row in self.rows
            ],
        }

    def row(self, criterion: str, r) -> dict:
        for row in self.rows:
            if row["criterion"] == criterion and row["r"] == r:
                return row
        raise KeyError(f"no row for criterion={criterion!r}, r={r!r}")


def _resolve_theta_star(cfg: ExperimentConfig, model):
    if cfg.theta_star is not None:
        return np.asarray(cfg.theta_star, dtype=float)
    if model.theta_star is not None:
        return np.asarray(model.theta_star, dtype=float)
    return None


def _build_emulator(cfg: ExperimentConfig, model):
    if cfg.emulator == "passthrough":
        return PassThrough(model)
    m = cfg.m if cfg.m is not None else 10 * (model.d + model.q)
    seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,))
    return fit_gp(model, m=m, seed=seed)


def _build_gen_config(cfg: ExperimentConfig, model, theta_star) -> GenConfig:
    defaults = _SYNTHETIC_DEFAULTS.get(cfg.model, {})
    sigma = cfg.sigma if cfg.sigma is not None else defaults.get("sigma")
    if sigma is None:
        raise ValueError(f"synthetic mode for model '{cfg.model}' requires sigma")
    if defaults.get("process") == "true" and cfg.model == "example2":
        zeta = example2_process
    else:
        if theta_star is None:
            raise ValueError(f"synthetic mode for model '{cfg.model}' requires theta_star")
        zeta = _ProcessAt(model, tuple(theta_star))
    return GenConfig(zeta=zeta, sigma=float(sigma), seed=0, omega=model.x_box.copy())


def _estimate_once(data, em, criterion, r, cfg: ExperimentConfig, fit_opts, seed):
    scfg = SamplingConfig(
        criterion=criterion,
        r=float(r),
        r0=cfg.r0,
        rho=cfg.rho,
        include_pilot=cfg.include_pilot,
        fit=fit_opts,
    )
    start = time.perf_counter()
    if criterion == "uniform":
        est, sub = uniform_fit(data, em, scfg, seed)
        pilot = None
    else:
        result = two_step(data, em, scfg, seed)
        est, sub, pilot = result.estimate, result.subsample, result.pilot
    seconds = time.perf_counter() - start
    report = estimate_variance(sub, pilot, est, em, scfg)
    ci = confidence_intervals(est, report.cov, cfg.ci_level)
    return est, ci, seconds


@dataclass(frozen=True)
class _ReplicationRunner:
    """Per-replication work, picklable so a process pool can map over t."""

    cfg: ExperimentConfig
    em: object
    gen: Optional[GenConfig]
    data: Optional[PhysicalData]
    theta_star: Optional[np.ndarray]
    rmse_f: bool
    theta_hat_fixed: Optional[np.ndarray]
    fit_opts: FitOptions

    def __call__(self, t: int) -> list:
        cfg = self.cfg
        if self.data is not None:
            data = self.data
            theta_hat = self.theta_hat_fixed
        else:
            seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, t))
            data = generate_physical_data(
                dataclasses.replace(self.gen, seed=seed), cfg.n
            )
            theta_hat = None
            if self.rmse_f:
                try:
                    theta_hat = fit_ols(data, self.em, opts=self.fit_opts).theta
                except SubcalError:
                    theta_hat = None
        records = []
        for ci_idx, criterion in enumerate(cfg.criteria):
            for ri_idx, r in enumerate(cfg.r_grid):
                rec = {
                    "t": t,
                    "criterion": criterion,
                    "r": r,
                    "ok": False,
                    "theta": None,
                    "err2": None,
                    "err2_f": None,
                    "ci_length": None,
                    "cover": None,
                    "seconds": None,
                }
                for attempt in range(3):
                    seed = np.random.SeedSequence(
                        entropy=cfg.seed, spawn_key=(2, t, ci_idx, ri_idx, attempt)
                    )
                    try:
                        est, ci, seconds = _estimate_once(
                            data, self.em, criterion, r, cfg, self.fit_opts, seed
                        )
                    except SubcalError:
                        continue
                    rec["ok"] = True
                    rec["theta"] = [float(v) for v in est.theta]
                    rec["seconds"] = seconds
                    rec["ci_length"] = [float(v) for v in (ci[:, 1] - ci[:, 0])]
                    if self.theta_star is not None:
                        rel = (est.theta - self.theta_star) / self.theta_star
                        rec["err2"] = float(rel @ rel)
                        rec["cover"] = [
                            bool(ci[j, 0] <= self.theta_star[j] <= ci[j, 1])
                            for j in range(len(self.theta_star))
                        ]
                    if theta_hat is not None:
                        rel_f = (est.theta - theta_hat) / theta_hat
                        rec["err2_f"] = float(rel_f @ rel_f)
                    break
                records.append(rec)
        return records


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(np.asarray(vals, dtype=float), axis=0)) if np.ndim(vals[0]) == 0 else [
        float(v) for v in np.mean(np.asarray(vals, dtype=float), axis=0)
    ]


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Run the full replication study described by ``cfg``."""
    model = get_model(cfg.model)
    csv_mode = cfg.csv_path is not None
    if csv_mode:
        # Real data carries no reference parameter; only an explicit one counts.
        theta_star = (
            np.asarray(cfg.theta_star, dtype=float) if cfg.theta_star is not None else None
        )
    else:
        theta_star = _resolve_theta_star(cfg, model)
    if theta_star is not None and np.any(theta_star == 0.0):
        raise ValueError("theta_star has a zero coordinate; normalized error is undefined")
    em = _build_emulator(cfg, model)

    rmse_f = cfg.compute_rmse_f if cfg.compute_rmse_f is not None else csv_mode
    fit_opts = cfg.fit_options()

    if csv_mode:
        if not (cfg.csv_x and cfg.csv_y):
            raise ValueError("csv mode requires csv_x and csv_y")
        data = load_csv(cfg.csv_path, cfg.csv_x, cfg.csv_y)
        theta_hat = fit_ols(data, em, opts=fit_opts).theta if rmse_f else None
        runner = _ReplicationRunner(
            cfg=cfg,
            em=em,
            gen=None,
            data=data,
            theta_star=theta_star,
            rmse_f=rmse_f,
            theta_hat_fixed=theta_hat,
            fit_opts=fit_opts,
        )
    else:
        gen = _build_gen_config(cfg, model, theta_star)
        runner = _ReplicationRunner(
            cfg=cfg,
            em=em,
            gen=gen,
            data=None,
            theta_star=theta_star,
            rmse_f=rmse_f,
            theta_hat_fixed=None,
            fit_opts=fit_opts,
        )

    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            per_t = list(pool.map(runner, range(cfg.T), chunksize=1))
    else:
        per_t = [runner(t) for t in range(cfg.T)]

    records = [rec for batch in per_t for rec in batch]
    rows = []
    for criterion in cfg.criteria:
        for r in cfg.r_grid:
            cell = [
                rec
                for rec in records
                if rec["criterion"] == criterion and rec["r"] == r
            ]
            ok = [rec for rec in cell if rec["ok"]]
            row = {
                "criterion": criterion,
                "r": r,
                "n_ok": len(ok),
                "n_failed": len(cell) - len(ok),
                "rmse": _mean_or_none([rec["err2"] for rec in ok]),
                "rmse_f": _mean_or_none([rec["err2_f"] for rec in ok]),
                "ci_length": _mean_or_none([rec["ci_length"] for rec in ok]),
                "coverage": _mean_or_none(
                    [
                        [float(b) for b in rec["cover"]] if rec["cover"] is not None else None
                        for rec in ok
                    ]
                ),
                "mean_seconds": _mean_or_none([rec["seconds"] for rec in ok]),
            }
            if cfg.keep_estimates:
                row["estimates"] = [
                    {"t": rec["t"], "ok": rec["ok"], "theta": rec["theta"]} for rec in cell
                ]
            rows.append(row)

    config_echo = dataclasses.asdict(cfg)
    for key, val in list(config_echo.items()):
        if isinstance(val, tuple):
            config_echo[key] = list(val)
        elif isinstance(val, Path):
            config_echo[key] = str(val)
    return MetricsReport(config=config_echo, rows=rows)


def _csv_value(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def emit_report(report: MetricsReport, out_dir) -> dict:
    """Write report.json, report.csv (both deterministic), and timings.json.

    Returns the paths written.  The JSON and CSV contain only reproducible
    quantities; wall-clock means go to timings.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    csv_path = out / "report.csv"
    timing_path = out / "timings.json"

    with json_path.open("w") as fh:
        json.dump(report.deterministic_payload(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with timing_path.open("w") as fh:
        json.dump(report.timing_payload(), fh, sort_keys=True, indent=2)
        fh.write("\n")

    lines = ["criterion,r,metric,coord,value"]
    for row in report.rows:
        base = f"{row['criterion']},{row['r']}"
        lines.append(f"{base},n_ok,,{row['n_ok']}")
        lines.append(f"{base},n_failed,,{row['n_failed']}")
        for metric in ("rmse", "rmse_f"):
            lines.append(f"{base},{metric},,{_csv_value(row[metric])}")
        for metric in ("ci_length", "coverage"):
            vals = row[metric]
            if vals is None:
                lines.append(f"{base},{metric},,")
            else:
                for j, v in enumerate(vals):
                    lines.append(f"{base},{metric},{j},{_csv_value(v)}")
    csv_path.write_text("\n".join(lines) + "\n")
    return {"report_json": json_path, "report_csv": csv_path, "timings_json": timing_path}
