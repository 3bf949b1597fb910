"""Command-line front end: ``run``, ``sweep`` and ``verify``.

Configuration is one JSON document; ``--set key.sub=value`` overrides
single entries (values parse as JSON, else as strings).  Exit codes:
0 success, 1 verification failure, 2 runtime failure, 3 configuration error.
"""

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys

from .errors import ConicalFlowError, ConfigurationError
from .flow import SolverConfig
from .functionals import FunctionalReport
from .geometry import REFERENCE, RadialGrid
from .limit import (DEFAULT_SCHEDULE, SweepSettings, persist_run, run_epsilon, run_sweep,
                    write_atomic)
from .regularization import RegularizationParams, select_k

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VERIFY, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_ENV = "CFL_OUTPUT_DIR"

TOP_KEYS = {"beta", "epsilon", "epsilon_schedule", "grid", "solver", "gamma_target",
            "output_dir", "k", "thresholds"}
GRID_KEYS = {"L", "n_points"}
SOLVER_KEYS = {"scheme", "dt_safety", "t_end", "snapshot_times", "dt_max",
               "normalization_horizon"}
MONITOR_COLUMNS = ("name", "t", "value", "bound_ok")
TABLE_COLUMNS = ("eps_a", "eps_b", "t", "window", "c0", "c1", "c2")


class ConfigError(ConfigurationError):
    pass


# ------------------------------------------------------------ configuration

def apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _number(cfg, key, where, default=None, required=False):
    if key not in cfg:
        if required:
            raise ConfigError(f"missing required key '{key}' in {where}")
        return default
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"key '{key}' in {where} must be a number, got {v!r}")
    return float(v)


def parse_config(raw: dict, mode: str):
    """Validate and normalize a configuration for ``run``, ``sweep`` or ``verify``."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys(raw, TOP_KEYS, "configuration")
    cfg = {}
    cfg["beta"] = _number(raw, "beta", "configuration", 0.5, required=(mode != "verify"))
    if not 0.0 < cfg["beta"] < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {cfg['beta']}")
    grid = raw.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object")
    _check_keys(grid, GRID_KEYS, "grid")
    n_points = grid.get("n_points", 2048)
    if isinstance(n_points, bool) or not isinstance(n_points, int):
        raise ConfigError("grid.n_points must be an integer")
    try:
        cfg["grid"] = RadialGrid(_number(grid, "L", "grid", 30.0), n_points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    solver = raw.get("solver", {})
    if not isinstance(solver, dict):
        raise ConfigError("solver must be an object")
    _check_keys(solver, SOLVER_KEYS, "solver")
    times = solver.get("snapshot_times", [])
    if not isinstance(times, list) or any(isinstance(t, bool) or not isinstance(t, (int, float))
                                          for t in times):
        raise ConfigError("solver.snapshot_times must be a list of numbers")
    try:
        cfg["solver"] = SolverConfig(
            t_end=_number(solver, "t_end", "solver", 1.0),
            dt_safety=_number(solver, "dt_safety", "solver", 0.2),
            snapshot_times=tuple(float(t) for t in times),
            scheme=solver.get("scheme", "ros2"),
            dt_max=_number(solver, "dt_max", "solver", 1e-2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg["normalization_horizon"] = _number(solver, "normalization_horizon", "solver", 10.0)
    cfg["gamma_target"] = _number(raw, "gamma_target", "configuration", 0.5)
    cfg["k"] = _number(raw, "k", "configuration", None)
    if mode == "run":
        if "epsilon_schedule" in raw:
            raise ConfigError("run takes 'epsilon', not 'epsilon_schedule'")
        cfg["epsilon"] = _number(raw, "epsilon", "configuration", required=True)
        if not cfg["epsilon"] > 0.0:
            raise ConfigError("epsilon must be > 0")
    else:
        if "epsilon" in raw:
            raise ConfigError(f"{mode} takes 'epsilon_schedule', not 'epsilon'")
        sched = raw.get("epsilon_schedule", list(DEFAULT_SCHEDULE))
        if not isinstance(sched, list) or not sched or any(
                isinstance(e, bool) or not isinstance(e, (int, float)) or e <= 0 for e in sched):
            raise ConfigError("epsilon_schedule must be a non-empty list of positive numbers")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("epsilon_schedule must be strictly decreasing")
        cfg["schedule"] = tuple(float(e) for e in sched)
    thresholds = raw.get("thresholds", {})
    if thresholds and mode != "verify":
        raise ConfigError("'thresholds' is only valid for verify")
    if not isinstance(thresholds, dict):
        raise ConfigError("thresholds must be an object")
    cfg["thresholds"] = thresholds
    out = raw.get("output_dir") or os.environ.get(OUTPUT_ENV)
    if mode != "verify" and not out:
        raise ConfigError(f"missing required key 'output_dir' (or set {OUTPUT_ENV})")
    cfg["output_dir"] = out
    return cfg


def load_config(path, overrides=()):
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    raw = copy.deepcopy(raw)
    for o in overrides:
        apply_override(raw, o)
    return raw


# ------------------------------------------------------------ output

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_run_outputs(run, directory):
    os.makedirs(directory, exist_ok=True)
    persist_run(run, os.path.join(directory, "run.json"))
    write_atomic(os.path.join(directory, "functionals.csv"),
                 _csv_text(FunctionalReport.CSV_COLUMNS, [r.row() for r in run.reports]))
    rows = [row for m in run.monitors for row in m.rows()]
    write_atomic(os.path.join(directory, "monitors.csv"), _csv_text(MONITOR_COLUMNS, rows))


# ------------------------------------------------------------ commands

def execute_run(raw: dict) -> int:
    try:
        cfg = parse_config(raw, "run")
        k = cfg["k"]
        if k is None:
            k = select_k(REFERENCE, cfg["grid"], cfg["beta"], [cfg["epsilon"]], cfg["gamma_target"])
        params = RegularizationParams(cfg["beta"], cfg["epsilon"], k, cfg["gamma_target"])
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = run_epsilon(params, cfg["solver"], REFERENCE, cfg["grid"],
                          cfg["normalization_horizon"])
        write_run_outputs(run, cfg["output_dir"])
    except (ConicalFlowError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"eps={params.epsilon:g}: ok, {len(run.snapshots)} snapshots -> {cfg['output_dir']}")
    return EXIT_OK


def execute_sweep(raw: dict, jobs: int = 1) -> int:
    try:
        cfg = parse_config(raw, "sweep")
        settings = SweepSettings(beta=cfg["beta"], solver=cfg["solver"],
                                 gamma_target=cfg["gamma_target"], k=cfg["k"],
                                 normalization_horizon=cfg["normalization_horizon"])
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        record = run_sweep(settings, cfg["schedule"], geom=REFERENCE, grid=cfg["grid"], jobs=jobs)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConicalFlowError, ArithmeticError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = cfg["output_dir"]
    try:
        os.makedirs(out, exist_ok=True)
        for i, (eps, run) in enumerate(zip(record.schedule, record.runs)):
            if run is None:
                print(f"eps={eps:g}: FAILED {record.failures[eps]}")
                continue
            write_run_outputs(run, os.path.join(out, f"eps_{i}"))
            print(f"eps={eps:g}: ok")
        rows = [[row[c] for c in TABLE_COLUMNS] for row in record.convergence_table]
        write_atomic(os.path.join(out, "convergence_table.csv"), _csv_text(TABLE_COLUMNS, rows))
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME if record.failures else EXIT_OK


def execute_verify(raw: dict, only=None) -> int:
    from .verification import CRITERIA, VerificationContext, run_criteria
    try:
        cfg = parse_config(raw, "verify")
        ctx = VerificationContext(beta=cfg["beta"], rho_max=cfg["grid"].rho_max,
                                  n_points=cfg["grid"].n_points, schedule=cfg["schedule"],
                                  thresholds=cfg["thresholds"])
    except (ConfigurationError, KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    numbers = sorted(CRITERIA) if not only else only
    if any(i not in CRITERIA for i in numbers):
        print(f"configuration error: criteria are numbered 1-{len(CRITERIA)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results = run_criteria(ctx, numbers)
    except (ConicalFlowError, ArithmeticError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print("failing criteria: " + ", ".join(f"{r.number} ({r.name})" for r in failed))
        return EXIT_VERIFY
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="conical-flow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "verify"):
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?" if name == "verify" else None,
                       help="JSON configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration entry")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1)
        if name == "verify":
            p.add_argument("--list", action="store_true", help="list criteria and exit")
            p.add_argument("--only", default=None, help="comma-separated criterion numbers")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "verify" and args.list:
        from .verification import CRITERIA
        for i, name in CRITERIA.items():
            print(f"{i:2d} {name}")
        return EXIT_OK
    try:
        raw = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return execute_run(raw)
    if args.command == "sweep":
        if args.jobs < 1:
            print("configuration error: --jobs must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        return execute_sweep(raw, args.jobs)
    only = None
    if args.only:
        try:
            only = [int(x) for x in args.only.split(",")]
        except ValueError:
            print("configuration error: --only takes comma-separated integers", file=sys.stderr)
            return EXIT_CONFIG
    return execute_verify(raw, only)


if __name__ == "__main__":
    sys.exit(main())
