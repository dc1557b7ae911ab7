"""Command line entry point.

    socialpressure <experiment> [--config FILE] [--seed N] [--out-dir DIR]
                   [--workers N] [--set key=value ...]

Exit codes: 0 success, 1 configuration error, 2 numerical failure (or a
failed self test).  Outputs are CSV files whose first comment lines carry
the config hash and seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, NumericalError, PicardConvergenceError
from .finite_system import InitialCondition, ModelParams, simulate
from .io import config_hash, write_csv


def _header(cfg, experiment, extra=()):
    return [f"config_hash={config_hash(cfgmod.as_record(cfg))} seed={cfg['seed']}",
            f"experiment={experiment}", *extra]


def _path(cfg, name):
    return os.path.join(cfg["out_dir"], name)


def _params(cfg, **over) -> ModelParams:
    m = cfg["model"]
    kw = dict(N=m["N"], h=m["h"], rf=cfgmod.rate_function(cfg), T=m["T"], seed=cfg["seed"],
              initial=cfgmod.initial_condition(cfg), grid_points=m["grid_points"],
              record_pressures=m["record_pressures"], record_events=True)
    kw.update(over)
    return ModelParams(**kw)


def run_simulate_finite(cfg, experiment):
    p = _params(cfg)
    files = []
    for r in range(cfg["finite"]["replicas"]):
        tr = simulate(p, replica=r)
        head = _header(cfg, experiment, [f"replica={r}"])
        tr.to_csv(_path(cfg, f"trajectory_{r:03d}.csv"), head)
        tr.events_to_csv(_path(cfg, f"events_{r:03d}.csv"), head)
        files += [f"trajectory_{r:03d}.csv", f"events_{r:03d}.csv"]
    return files


def run_solve_limit(cfg, experiment):
    from .limit_sde import picard_solve

    m = cfg["model"]
    drift = picard_solve(cfgmod.rate_function(cfg), m["h"], cfgmod.initial_condition(cfg), m["T"],
                         cfgmod.picard_config(cfg), seed=cfg["seed"])
    head = _header(cfg, experiment)
    drift.to_csv(_path(cfg, "drift.csv"), head)
    rows = [(w["window"][0], w["window"][1], i + 1, res, int(w["converged"]))
            for w in drift.residuals for i, res in enumerate(w["residuals"])]
    write_csv(_path(cfg, "picard_residuals.csv"),
              ["window_start", "window_end", "iteration", "residual", "converged"], rows, head)
    return ["drift.csv", "picard_residuals.csv"]


def run_coupling_error(cfg, experiment):
    from .coupling import fit_rate, strong_error_curve

    m = cfg["model"]
    table = strong_error_curve(cfgmod.rate_function(cfg), m["h"], cfgmod.initial_condition(cfg), m["T"],
                               cfg["coupling"]["Ns"], cfg["coupling"]["replicas"], seed=cfg["seed"],
                               picard=cfgmod.picard_config(cfg), workers=cfg["workers"])
    head = _header(cfg, experiment)
    table.to_csv(_path(cfg, "error_curve.csv"), head)
    slope, intercept, r2 = fit_rate(table)
    with open(_path(cfg, "rate_fit.txt"), "w") as fh:
        for line in head:
            fh.write(f"# {line}\n")
        fh.write(f"slope = {slope!r}\nintercept = {intercept!r}\nr2 = {r2!r}\n")
    return ["error_curve.csv", "rate_fit.txt"]


def run_invariant(cfg, experiment):
    from .invariant import InvariantDensity, gamma_residual, solve_gamma

    rf = cfgmod.rate_function(cfg)
    h = cfg["model"]["h"]
    head = _header(cfg, experiment)
    inv = cfg["invariant"]
    if inv["gamma"] is not None:
        gammas = [inv["gamma"]]
    else:
        sol = solve_gamma(rf, h)
        gammas = [g for g in sol.roots if g != 0]
        write_csv(_path(cfg, "roots.csv"), ["gamma", "residual"],
                  [(g, gamma_residual(rf, h, g)) for g in sol.roots], head)
    files = [] if inv["gamma"] is not None else ["roots.csv"]
    for i, g in enumerate(gammas):
        dens = InvariantDensity(rf, h, g)
        x_max = inv["x_max"] if inv["x_max"] is not None else 10.0 * abs(g) * h
        xs = np.sign(g) * np.linspace(0.0, x_max, inv["points"])
        name = f"density_{i}.csv"
        dens.to_csv(_path(cfg, name), xs, head + [f"gamma={g!r}"])
        files.append(name)
    return files


def run_phase_diagram(cfg, experiment):
    from .invariant import phase_diagram, write_phase_diagram

    rows = phase_diagram(cfgmod.rate_function(cfg), [float(h) for h in cfg["phase"]["h_grid"]])
    write_phase_diagram(_path(cfg, "phase.csv"), rows, _header(cfg, experiment))
    return ["phase.csv"]


# figure runs: (group label, h, initial condition for replica r)
def _figure_groups(experiment, replicas):
    def split(r):
        return InitialCondition.constant(1.0 if r < (replicas + 1) // 2 else -1.0)

    def zero(r):
        return InitialCondition.constant(0.0)

    if experiment == "figure1":
        return [("h0.5", 0.5, split), ("h2", 2.0, zero)]
    if experiment == "figure2":
        return [("h1_split", 1.0, split), ("h1_zero", 1.0, zero)]
    return [("h0.5", 0.5, split), ("h2", 2.0, zero)]


def run_figure(cfg, experiment):
    from .rates import RateFunction

    f = cfg["figure"]
    rf = RateFunction.exponential() if experiment == "figure3" else RateFunction.tanh_plus_one()
    head = _header(cfg, experiment)
    manifest = []
    files = []
    for label, h, init_for in _figure_groups(experiment, f["replicas"]):
        for r in range(f["replicas"]):
            init = init_for(r)
            p = ModelParams(N=f["N"], h=h, rf=rf, T=f["T"], seed=cfg["seed"], initial=init,
                            grid_points=f["grid_points"], record_events=False)
            tr = simulate(p, replica=r)
            name = f"{label}_r{r:02d}.csv"
            tr.to_csv(_path(cfg, name), head + [f"h={h!r} initial={init.value!r} replica={r}"])
            manifest.append((name, h, init.value, cfg["seed"], r, tr.mean_pressure[-1]))
            files.append(name)
    write_csv(_path(cfg, "manifest.csv"), ["file", "h", "initial", "seed", "replica", "final_mean_pressure"],
              manifest, head)
    files.append("manifest.csv")
    return files


def run_selftest(cfg, experiment):
    from .acceptance import run_all

    lines = []
    results = run_all(only=set(cfg["selftest"]["only"]) or None, echo=lambda s: (print(s), lines.append(s)))
    with open(_path(cfg, "selftest.txt"), "w") as fh:
        for line in _header(cfg, experiment):
            fh.write(f"# {line}\n")
        fh.write("\n".join(lines) + "\n")
    if not all(r.passed for r in results):
        raise NumericalError("self test failed: " + ", ".join(str(r.number) for r in results if not r.passed))
    return ["selftest.txt"]


RUNNERS = {
    "simulate-finite": run_simulate_finite,
    "solve-limit": run_solve_limit,
    "coupling-error": run_coupling_error,
    "invariant": run_invariant,
    "phase-diagram": run_phase_diagram,
    "figure1": run_figure,
    "figure2": run_figure,
    "figure3": run_figure,
    "selftest": run_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="socialpressure", description="Social pressure jump model experiments.")
    ap.add_argument("experiment", choices=cfgmod.EXPERIMENTS)
    ap.add_argument("--config", help="TOML configuration file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. --set model.h=2 (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = dict(cfgmod.parse_assignment(s) for s in args.set)
        for key, val in (("seed", args.seed), ("out_dir", args.out_dir), ("workers", args.workers)):
            if val is not None:
                overrides[key] = val
        cfg = cfgmod.load(args.config, overrides)
        if cfg["experiment"] is not None and cfg["experiment"] != args.experiment:
            raise ConfigError("experiment", f"config says {cfg['experiment']!r} but {args.experiment!r} was requested")
        cfg["experiment"] = args.experiment
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(cfg["out_dir"], exist_ok=True)
    try:
        files = RUNNERS[args.experiment](cfg, args.experiment)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PicardConvergenceError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        print(json.dumps({"residuals": exc.residuals}), file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for name in files:
        print(os.path.join(cfg["out_dir"], name))
    return 0


if __name__ == "__main__":
    sys.exit(main())
