"""Command-line pipeline: collect, fit-mfd, partition, run, analyze.

Every command ends with one ``key=value`` line on stdout.  Exit status is 0
on success, 1 for a domain failure (e.g. insufficient excitation, solver
trouble, gridlock-free fit impossible) and 2 for configuration problems.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, harness, mfd, partition
from .lti import read_trajectory_csv, write_trajectory_csv
from .scenario import ScenarioConfig

EXIT_OK, EXIT_DOMAIN, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    pass


class DomainError(Exception):
    pass


def _summary(**kv) -> str:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.9g}"
        elif isinstance(v, (list, tuple, np.ndarray)):
            v = ";".join(f"{x:.9g}" if isinstance(x, (float, np.floating)) else str(x) for x in v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _load_config(path, seed=None) -> ScenarioConfig:
    try:
        cfg = ScenarioConfig.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _out_dir(args, cfg: ScenarioConfig | None = None) -> Path:
    out = Path(args.out if args.out is not None else (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- collect ---------------------------------------------------------------
def cmd_collect(args) -> str:
    cfg = _load_config(args.config, args.seed)
    steps = args.steps if args.steps is not None else cfg.collect.steps
    depth = cfg.deepc.T_ini + cfg.deepc.T_f
    if steps < depth:
        raise ConfigError(f"{steps} steps are fewer than T_ini + T_f = {depth}")
    res = harness.collect(cfg, steps=steps)
    out = _out_dir(args, cfg)
    write_trajectory_csv(out / "data.csv", res.trajectory)
    per = res.scatter.reshape(cfg.N, -1, 2)
    for i, r in enumerate(cfg.regions):
        mfd.write_scatter_csv(out / f"scatter_{r.name}.csv", per[i])
    line = _summary(rows=res.trajectory.T, m=res.trajectory.m, p=res.trajectory.p, depth=res.depth,
                    rank=res.rank, required_rank=res.required_rank, pe=int(res.pe_ok), out=out)
    if not res.pe_ok:
        raise DomainError(line)
    return line


# -- fit-mfd ---------------------------------------------------------------
def _read_scatter(path):
    try:
        return mfd.read_scatter_csv(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"scatter file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_fit_mfd(args) -> str:
    out = _out_dir(args)
    names, est = [], []
    for path in args.scatter:
        pts = _read_scatter(path)
        try:
            e = mfd.fit(pts)
        except mfd.DegenerateFitError as exc:
            raise DomainError(f"{path}: {exc}") from exc
        name = Path(path).stem.removeprefix("scatter_")
        mfd.write_fit_csv(out / f"mfd_{name}.csv", e)
        names.append(name)
        est.append(e)
    with open(out / "mfd_fit.csv", "w") as fh:
        fh.write("region,rho_cr,rho_max,rmse\n")
        for n, e in zip(names, est):
            rmax = "" if e.rho_max is None else repr(e.rho_max)
            fh.write(f"{n},{e.rho_cr!r},{rmax},{e.rmse!r}\n")
    return _summary(regions=";".join(names), rho_cr=[e.rho_cr for e in est],
                    rho_max=["nan" if e.rho_max is None else f"{e.rho_max:.9g}" for e in est], out=out)


def read_fit_table(path) -> dict[str, float]:
    """``region -> rho_cr`` from an ``mfd_fit.csv`` written by ``fit-mfd``."""
    refs = {}
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise ConfigError(f"MFD fit table not found: {path}") from exc
    if not lines or lines[0].split(",")[:2] != ["region", "rho_cr"]:
        raise ConfigError(f"{path}:1: header must start with 'region,rho_cr'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            refs[cells[0]] = float(cells[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: malformed row") from exc
    return refs


# -- partition -------------------------------------------------------------
def cmd_partition(args) -> str:
    try:
        graph = partition.read_roads_csv(args.roads, args.edges)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 1 <= args.regions <= graph.n:
        raise ConfigError(f"--regions must lie in [1, {graph.n}]")
    res = partition.partition(graph, args.regions, m=args.depth, phi=args.phi, seed=args.seed or 0)
    out = _out_dir(args)
    partition.write_assignment_csv(out / "assignment.csv", res.labels)
    sizes = np.bincount(res.labels, minlength=args.regions)
    return _summary(roads=graph.n, regions=args.regions, sizes=list(sizes),
                    within_variance=partition.within_region_variance(graph.densities, res.labels),
                    iterations=res.iterations, repaired=res.repaired, out=out)


# -- run -------------------------------------------------------------------
def _reference(cfg: ScenarioConfig, path) -> np.ndarray:
    if path is None:
        raise ConfigError("DeePC needs --reference (an mfd_fit.csv from fit-mfd)")
    refs = read_fit_table(path)
    missing = [r.name for r in cfg.regions if r.name not in refs]
    if missing:
        raise ConfigError(f"{path}: no critical density for region(s) {missing}")
    return np.array([refs[r.name] for r in cfg.regions])


def _run_one(cfg: ScenarioConfig, controller: str, period: int, data_path, y_ref, out: Path) -> dict:
    data = read_trajectory_csv(data_path) if data_path else None
    rec = harness.run(cfg, controller, data=data, y_ref=y_ref, period=period)
    rec.write(out)
    s = analysis.summarize_run(rec)
    bad = sum(st not in ("optimal", "static", "hold", "warmup") for st in rec.status)
    return dict(controller=controller, period=period, time_spent_veh_h=s.time_spent_veh_h,
                trips=s.trips_completed, gridlock=int(s.gridlock), solver_issues=bad, out=str(out))


def cmd_run(args) -> str:
    cfg = _load_config(args.config, args.seed)
    controller = args.controller or cfg.controller
    if controller not in ("baseline", "mpc", "deepc"):
        raise ConfigError(f"unknown controller {controller!r}")
    periods = [int(p) for p in args.sweep.split(",")] if args.sweep else [args.period or cfg.period]
    if any(p < 1 for p in periods):
        raise ConfigError("periods must be positive")
    data_path, y_ref = None, None
    if controller == "deepc":
        data_path = args.data or cfg.deepc.data_file
        if not data_path or not Path(data_path).exists():
            raise ConfigError(f"DeePC needs a collected data file (got {data_path!r})")
        try:
            read_trajectory_csv(data_path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        y_ref = _reference(cfg, args.reference)
    out = _out_dir(args, cfg)
    targets = [(p, out if len(periods) == 1 else out / f"period_{p}") for p in periods]
    if len(targets) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futs = [pool.submit(_run_one, cfg, controller, p, data_path, y_ref, o) for p, o in targets]
            results = [f.result() for f in futs]
    else:
        results = [_run_one(cfg, controller, p, data_path, y_ref, o) for p, o in targets]
    line = _summary(controller=controller, periods=[r["period"] for r in results],
                    time_spent_veh_h=[r["time_spent_veh_h"] for r in results],
                    gridlock=[r["gridlock"] for r in results],
                    solver_issues=sum(r["solver_issues"] for r in results), out=out)
    if any(r["solver_issues"] for r in results):
        raise DomainError(line)
    return line


# -- analyze ---------------------------------------------------------------
def cmd_analyze(args) -> str:
    try:
        rec = harness.RunRecord.read(args.run_dir)
    except FileNotFoundError as exc:
        raise ConfigError(f"incomplete run directory: {exc.filename}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    estimates, labels = None, None
    if args.scatter:
        pts = [_read_scatter(p) for p in args.scatter]
        try:
            estimates = [mfd.fit(p) for p in pts]
        except mfd.DegenerateFitError as exc:
            raise DomainError(str(exc)) from exc
        labels = [Path(p).stem for p in args.scatter]
    out = _out_dir(args) if args.out is not None else Path(args.run_dir)
    paths = analysis.analyze_run(rec, out, k=args.components, estimates=estimates, labels=labels)
    s = analysis.summarize_run(rec)
    tt = "nan" if s.travel_time_min is None else f"{s.travel_time_min:.9g}"
    return _summary(controller=rec.controller, period=rec.period, time_spent_veh_h=s.time_spent_veh_h,
                    travel_time_min=tt, trips=s.trips_completed, gridlock=int(s.gridlock),
                    files=";".join(sorted(p.name for p in paths.values())), out=out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perimeter-deepc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("collect", help="excite the plant and record a data set")
    p.add_argument("config")
    p.add_argument("--steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fit-mfd", help="fit quartic MFDs to density/flow scatter files")
    p.add_argument("scatter", nargs="+")
    common(p)
    p.set_defaults(func=cmd_fit_mfd)

    p = sub.add_parser("partition", help="split a road graph into homogeneous regions")
    p.add_argument("roads")
    p.add_argument("edges")
    p.add_argument("--regions", type=int, required=True)
    p.add_argument("--depth", type=int, default=None, help="snake length (default n - 1)")
    p.add_argument("--phi", type=float, default=0.5)
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="closed-loop run under baseline, mpc or deepc")
    p.add_argument("config")
    p.add_argument("--controller", choices=("baseline", "mpc", "deepc"), default=None)
    p.add_argument("--period", type=int, default=None, help="duty cycles between controller updates")
    p.add_argument("--sweep", default=None, help="comma-separated periods, one run each")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--data", default=None, help="collected data CSV (deepc)")
    p.add_argument("--reference", default=None, help="mfd_fit.csv providing critical densities (deepc)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="PCA, metrics and MFD tables for a finished run")
    p.add_argument("run_dir")
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--scatter", nargs="*", default=None, help="scatter files to compare")
    common(p)
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        line = args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_summary(status="config_error"))
        return EXIT_CONFIG
    except (DomainError, harness.PersistencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_summary(status="domain_error"))
        return EXIT_DOMAIN
    print(line + " status=ok")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
