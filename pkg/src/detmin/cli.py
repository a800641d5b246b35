"""Command-line front end: single fits, (rho, phi) sweeps and plot-ready tables.

Usage::

    detmin fit --config fit.json [--seed N]
    detmin sweep --config sweep.json --out records.csv [--seed N] [--threads K]
    detmin plot-data --in records_aggregate.csv --out plot.csv

Exit codes: 0 success, 2 malformed configuration or input, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import generator, metrics
from .errors import NumericalError
from .generator import ModelParams, load_matrix_csv
from .objective import ObjectiveParams
from .solver import SolverConfig, fit

log = logging.getLogger("detmin")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
THREADS_ENV = "DETMIN_THREADS"

RECORD_COLUMNS = ("rho", "phi", "trial", "seed", "sinr_map_db", "sinr_lmmse_db",
                  "objective_final", "outer_iters", "wall_time_s", "status")
AGGREGATE_COLUMNS = ("rho", "phi", "n_ok", "mean_sinr_map_db", "std_sinr_map_db",
                     "mean_sinr_lmmse_db", "std_sinr_lmmse_db")
PLOT_COLUMNS = ("log10_rho", "phi", "mean_sinr_db", "std_sinr_db", "mean_lmmse_db")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def fmt(x):
    """Nine significant digits; integers are written as such."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".9g")


# ---------------------------------------------------------------- configuration

def _lambda_override(rule, model):
    """None for the prescribed weight, else the manual value."""
    if rule in (None, "prescribed"):
        return None
    if isinstance(rule, dict) and set(rule) == {"manual"}:
        value = float(rule["manual"])
        if not value > 0:
            raise ConfigError("manual lambda must be positive")
        return value
    raise ConfigError(f"lambda_rule must be 'prescribed' or {{'manual': value}}, got {rule!r}")


def _rho_grid(spec):
    if isinstance(spec, dict):
        try:
            grid = np.logspace(math.log10(spec["start"]), math.log10(spec["stop"]), int(spec["num"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad rho_grid {spec!r}: {exc}") from None
    else:
        grid = np.asarray(spec, dtype=float)
    grid = np.atleast_1d(grid)
    if grid.size == 0 or not np.all(grid > 0):
        raise ConfigError("rho_grid must be nonempty and strictly positive")
    return [float(v) for v in grid]


@dataclass
class SweepConfig:
    """One (rho, phi) experiment grid.

    ``model`` is a :class:`ModelParams` dictionary without ``Psi``/``rho``/``phi``;
    those are filled in per cell.
    """

    model: dict
    rho_grid: list = field(default_factory=lambda: _rho_grid({"start": 1e-4, "stop": 1e2, "num": 13}))
    phi_values: list = field(default_factory=lambda: [6.0, 250.0])
    trials_per_cell: int = 10
    base_seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    lambda_rule: object = "prescribed"
    output_path: str = None
    record_timing: bool = True

    def __post_init__(self):
        for key in ("Psi", "rho", "phi"):
            if key in self.model:
                raise ConfigError(f"sweep model template must not set {key!r}")
        self.rho_grid = _rho_grid(self.rho_grid)
        self.phi_values = [float(p) for p in self.phi_values]
        if not self.phi_values:
            raise ConfigError("phi_values must be nonempty")
        if int(self.trials_per_cell) != self.trials_per_cell or self.trials_per_cell < 1:
            raise ConfigError("trials_per_cell must be a positive integer")
        self.trials_per_cell = int(self.trials_per_cell)
        self.base_seed = int(self.base_seed)
        # validate the template once, with any admissible phi
        for phi in self.phi_values:
            self.cell_model(self.rho_grid[0], phi)
        _lambda_override(self.lambda_rule, None)

    def cell_model(self, rho, phi):
        d = dict(self.model)
        d.update(rho=rho, phi=phi)
        return ModelParams.from_dict(d)

    @classmethod
    def from_dict(cls, d):
        known = {"model", "rho_grid", "phi_values", "trials_per_cell", "base_seed",
                 "solver", "lambda_rule", "output_path", "record_timing"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sweep option(s): {sorted(unknown)}")
        if "model" not in d:
            raise ConfigError("sweep config needs a 'model' section")
        kw = dict(d)
        kw["solver"] = SolverConfig.from_dict(d.get("solver", {}))
        return cls(**kw)


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def objective_params(model, lambda_rule="prescribed"):
    return ObjectiveParams(sigma_v2=model.sigma_v2, Psi=model.Psi, phi=model.phi,
                           M=model.M, r=model.r,
                           lam_override=_lambda_override(lambda_rule, model))


# ---------------------------------------------------------------- fit

def run_fit(cfg):
    """Generate (or load) data, fit, and summarise recovery against the LMMSE benchmark."""
    known = {"model", "solver", "lambda_rule", "seed", "data", "output_path"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown fit option(s): {sorted(unknown)}")
    if "model" not in cfg:
        raise ConfigError("fit config needs a 'model' section")
    model = ModelParams.from_dict(cfg["model"])
    scfg = SolverConfig.from_dict(cfg.get("solver", {}))
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    data = cfg.get("data")
    if data:
        Y = load_matrix_csv(data["Y"])
        H_g = load_matrix_csv(data["H_g"]) if "H_g" in data else None
        S_g = load_matrix_csv(data["S_g"]) if "S_g" in data else None
        if Y.shape != (model.M, model.N):
            raise ConfigError(f"Y has shape {Y.shape}, model says {(model.M, model.N)}")
    else:
        g = generator.generate(model, rng)
        Y, H_g, S_g = g.Y, g.H_g, g.S_g
    params = objective_params(model, cfg.get("lambda_rule", "prescribed"))
    scfg.seed = seed
    t0 = time.perf_counter()
    res = fit(Y, model.domain, params, scfg)
    wall = time.perf_counter() - t0
    summary = {
        "model": model.to_dict(),
        "seed": seed,
        "lambda": params.lam,
        "objective_final": res.objective_trace[-1],
        "outer_iters": res.outer_iters_used,
        "warmup_iters": res.warmup_iters,
        "converged": res.converged,
        "sinr_map_db": None,
        "sinr_lmmse_db": None,
    }
    if S_g is not None:
        summary["sinr_map_db"] = metrics.aligned_sinr_db(S_g, res.S_hat, model.domain)
    if S_g is not None and H_g is not None:
        S_l = metrics.lmmse_estimate(Y, H_g, model.sigma_v2, model.domain)
        summary["sinr_lmmse_db"] = metrics.sinr_db(S_g, S_l)
    log.info("fit: %d outer iterations in %.2f s", res.outer_iters_used, wall)
    return summary, res


# ---------------------------------------------------------------- sweep

def cell_seed(base_seed, i_rho, i_phi, trial):
    """Seed for one sweep cell, independent of every other cell."""
    ss = np.random.SeedSequence([base_seed, i_rho, i_phi, trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _run_cell(args):
    sweep, i_rho, i_phi, trial = args
    rho, phi = sweep.rho_grid[i_rho], sweep.phi_values[i_phi]
    seed = cell_seed(sweep.base_seed, i_rho, i_phi, trial)
    rec = {"rho": rho, "phi": phi, "trial": trial, "seed": seed,
           "sinr_map_db": math.nan, "sinr_lmmse_db": math.nan, "objective_final": math.nan,
           "outer_iters": 0, "wall_time_s": 0.0, "status": "ok"}
    t0 = time.perf_counter()
    try:
        model = sweep.cell_model(rho, phi)
        g = generator.generate(model, np.random.default_rng(seed))
        params = objective_params(model, sweep.lambda_rule)
        scfg = SolverConfig.from_dict(sweep.solver.to_dict())
        scfg.seed = seed
        res = fit(g.Y, model.domain, params, scfg)
        rec["sinr_map_db"] = metrics.aligned_sinr_db(g.S_g, res.S_hat, model.domain)
        S_l = metrics.lmmse_estimate(g.Y, g.H_g, model.sigma_v2, model.domain)
        rec["sinr_lmmse_db"] = metrics.sinr_db(g.S_g, S_l)
        rec["objective_final"] = res.objective_trace[-1]
        rec["outer_iters"] = res.outer_iters_used
    except NumericalError as exc:
        rec["status"] = f"numerical_error: {exc.args[0]}"
    except Exception as exc:  # one bad cell must not sink the sweep
        rec["status"] = f"error: {type(exc).__name__}: {exc}"
    if sweep.record_timing:
        rec["wall_time_s"] = time.perf_counter() - t0
    return rec


def resolve_threads(flag):
    if flag is not None:
        n = flag
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def run_sweep(sweep, threads=1):
    """All cell records, sorted by (rho index, phi index, trial)."""
    cells = [(sweep, i, j, t) for i in range(len(sweep.rho_grid))
             for j in range(len(sweep.phi_values)) for t in range(sweep.trials_per_cell)]
    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        records = [_run_cell(c) for c in cells]
    order = {(c[1], c[2], c[3]): k for k, c in enumerate(cells)}
    rho_idx = {v: i for i, v in enumerate(sweep.rho_grid)}
    phi_idx = {v: i for i, v in enumerate(sweep.phi_values)}
    records.sort(key=lambda r: order[(rho_idx[r["rho"]], phi_idx[r["phi"]], r["trial"])])
    return records


def aggregate(records):
    """Per-(rho, phi) mean and standard deviation over the successful trials."""
    groups = {}
    for rec in records:
        groups.setdefault((rec["rho"], rec["phi"]), []).append(rec)
    rows = []
    for (rho, phi), recs in groups.items():
        ok = [r for r in recs if r["status"] == "ok"]
        m = np.array([r["sinr_map_db"] for r in ok], dtype=float)
        l = np.array([r["sinr_lmmse_db"] for r in ok], dtype=float)
        stat = lambda a, f: float(f(a)) if a.size else math.nan
        rows.append({"rho": rho, "phi": phi, "n_ok": len(ok),
                     "mean_sinr_map_db": stat(m, np.mean), "std_sinr_map_db": stat(m, np.std),
                     "mean_sinr_lmmse_db": stat(l, np.mean), "std_sinr_lmmse_db": stat(l, np.std)})
    return rows


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def aggregate_path(out):
    out = Path(out)
    return out.with_name(out.stem + "_aggregate" + (out.suffix or ".csv"))


# ---------------------------------------------------------------- plot data

def emit_plot_data(in_path, out_path):
    """Rewrite an aggregate CSV into the plotting schema; returns the number of rows."""
    try:
        header, rows = read_csv(in_path)
    except OSError as exc:
        raise ConfigError(f"cannot read {in_path}: {exc}") from None
    if not header and not rows:
        log.warning("%s is empty; writing a header-only plot table", in_path)
        write_csv(out_path, PLOT_COLUMNS, [])
        return 0
    needed = {"rho", "phi", "mean_sinr_map_db", "std_sinr_map_db", "mean_sinr_lmmse_db"}
    missing = needed - set(header)
    if missing:
        raise ConfigError(f"{in_path} lacks column(s) {sorted(missing)}")
    if not rows:
        log.warning("%s has no data rows; writing a header-only plot table", in_path)
    out = []
    for row in rows:
        try:
            out.append({"log10_rho": math.log10(float(row["rho"])), "phi": float(row["phi"]),
                        "mean_sinr_db": float(row["mean_sinr_map_db"]),
                        "std_sinr_db": float(row["std_sinr_map_db"]),
                        "mean_lmmse_db": float(row["mean_sinr_lmmse_db"])})
        except ValueError as exc:
            raise ConfigError(f"{in_path}: bad value ({exc})") from None
    out.sort(key=lambda r: (r["phi"], r["log10_rho"]))
    write_csv(out_path, PLOT_COLUMNS, out)
    return len(out)


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="detmin", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="generate one data set, fit it and report SINR")
    f.add_argument("--config", required=True)
    f.add_argument("--seed", type=int, help="override the config seed")
    f.add_argument("--out", help="write the JSON summary here instead of stdout")

    s = sub.add_parser("sweep", help="run the (rho, phi) grid and write per-trial records")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="records CSV; the aggregate goes next to it")
    s.add_argument("--seed", type=int, help="override base_seed")
    s.add_argument("--threads", type=int, help=f"worker processes (default ${THREADS_ENV} or 1)")

    d = sub.add_parser("plot-data", help="convert an aggregate CSV to the plotting schema")
    d.add_argument("--in", dest="in_path", required=True)
    d.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            cfg = load_json(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            summary, _ = run_fit(cfg)
            text = json.dumps(summary, indent=2, sort_keys=True)
            out = args.out or cfg.get("output_path")
            if out:
                Path(out).write_text(text + "\n", encoding="utf-8")
            else:
                print(text)
        elif args.command == "sweep":
            cfg = load_json(args.config)
            if args.seed is not None:
                cfg["base_seed"] = args.seed
            sweep = SweepConfig.from_dict(cfg)
            out = args.out or sweep.output_path
            if not out:
                raise ConfigError("no output path: pass --out or set output_path")
            records = run_sweep(sweep, resolve_threads(args.threads))
            write_csv(out, RECORD_COLUMNS, records)
            write_csv(aggregate_path(out), AGGREGATE_COLUMNS, aggregate(records))
            failed = sum(r["status"] != "ok" for r in records)
            if failed:
                log.warning("%d of %d cells failed", failed, len(records))
            if failed == len(records):
                return EXIT_NUMERICAL
        else:
            emit_plot_data(args.in_path, args.out)
    except NumericalError as exc:
        print(f"detmin: numerical failure: {exc.args[0]}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"detmin: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
