"""Command-line entry point and run orchestration.

    chemoflow simulate <config>    [--out DIR] [--tol TOL] [--snapshots t1,t2,...]
    chemoflow convergence <config> [--out DIR] [--tol TOL] [--assert-orders lo,hi]

Exit codes: 0 success, 1 configuration or output error, 2 solver failure
(some convergence row failed), 3 an asserted order fell outside ``[lo, hi]``.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import mms
from .config import (
    ConfigError,
    RunConfig,
    expression_function,
    expression_gradient,
    expression_laplacian,
    parse_config,
    serialize_config,
)
from .mesh import generate_rect_mesh
from .output import (
    OutputError,
    write_convergence_csv,
    write_diagnostics_csv,
    write_series_csv,
    write_text,
    write_vtk_snapshot,
)
from .scheme import (
    Forcing,
    InitialData,
    SimulationError,
    build_spaces,
    competition_initial_data,
    run_simulation,
)

log = logging.getLogger("chemoflow")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ORDERS = 0, 1, 2, 3
NORMS = ("linf_l2", "l2_h1", "linf_h1")


# -- initial data -------------------------------------------------------


def custom_initial_data(expressions: dict) -> InitialData:
    """Initial fields from ``[initial]`` expressions; ``s = grad c``."""
    def scalar(key):
        text = expressions.get(key, "0")
        return expression_function(text), expression_gradient(text)

    n, gn = scalar("n")
    w, gw = scalar("w")
    c, gc = scalar("c")
    lap_c = expression_laplacian(expressions["c"])
    u1, gu1 = scalar("u1")
    u2, gu2 = scalar("u2")

    def zero(x, y):
        return np.zeros(np.broadcast(x, y).shape)

    return InitialData(
        n=n, grad_n=gn, w=w, grad_w=gw, c=c, grad_c=gc,
        s=gc, div_s=lap_c, rot_s=zero,
        u=lambda x, y: (u1(x, y), u2(x, y)),
        grad_u=lambda x, y: (gu1(x, y), gu2(x, y)),
        pi=zero,
    )


def problem_data(cfg: RunConfig):
    """``(InitialData, Forcing or None)`` for the configured initial selector."""
    if cfg.initial == "test2-manufactured":
        return InitialData.from_solution(mms.TEST2), Forcing.from_solution(mms.TEST2)
    if cfg.initial == "competition-2d":
        return competition_initial_data(), None
    return custom_initial_data(cfg.expressions), None


# -- simulate -----------------------------------------------------------


@dataclass
class SimulateResult:
    trajectory: object
    files: list = field(default_factory=list)
    error: SimulationError | None = None


def run_simulate(cfg: RunConfig) -> SimulateResult:
    """March one run and write ``series.csv``, ``diagnostics.csv`` and snapshots.

    On a solver failure everything computed so far is still written and
    the error is returned in ``result.error``.
    """
    spaces = build_spaces(generate_rect_mesh(cfg.resolutions[0], cfg.resolutions[0]))
    data, forcing = problem_data(cfg)
    err = None
    try:
        traj = run_simulation(spaces, cfg.model_params(), data, cfg.dt, cfg.T, forcing,
                              snapshot_times=cfg.snapshots, tol=cfg.tol)
    except SimulationError as exc:
        traj, err = exc.trajectory, exc
    out = cfg.out_dir
    res = SimulateResult(traj, error=err)
    if traj.rows:
        res.files.append(write_series_csv(traj.rows, os.path.join(out, "series.csv")))
        res.files.append(write_diagnostics_csv(traj.rows, traj.diagnostics,
                                               os.path.join(out, "diagnostics.csv")))
    for t, state in sorted(traj.snapshots.items()):
        path = os.path.join(out, f"snapshot_{state.m:06d}.vtk")
        res.files.append(write_vtk_snapshot(spaces.mesh, state, path))
    return res


# -- convergence ----------------------------------------------------------


@dataclass
class ErrorReport:
    """Rows ``{resolution, var, norm, error, order, failed}`` in table order."""

    mode: str
    rows: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return bool(self.failures)

    def errors(self, var, norm):
        return [r["error"] for r in self.rows if r["var"] == var and r["norm"] == norm]

    def orders(self, var, norm):
        return [r["order"] for r in self.rows
                if r["var"] == var and r["norm"] == norm and r["order"] is not None]


def _study_runs(cfg: RunConfig):
    """``(resolution label, step size or mesh width, k, dt)`` from coarse to fine."""
    if cfg.mode == "convergence-time":
        k = cfg.resolutions[0]
        return [(dt, dt, k, dt) for dt in sorted(cfg.dts, reverse=True)]
    dt = cfg.dts[0]
    return [(k, 1.0 / k, k, dt) for k in sorted(cfg.resolutions)]


def run_convergence_study(cfg: RunConfig, progress=None) -> ErrorReport:
    """One manufactured-solution run per resolution, then observed orders.

    A failing run marks its rows and the study moves on; orders are only
    computed between neighbouring rows that both succeeded.
    """
    if cfg.initial != "test2-manufactured":
        raise ConfigError("convergence studies need initial = test2-manufactured", "initial")
    data, forcing = problem_data(cfg)
    params = cfg.model_params()
    report = ErrorReport(cfg.mode)
    results = []
    for label, h, k, dt in _study_runs(cfg):
        spaces = build_spaces(generate_rect_mesh(k, k))
        acc = mms.ErrorAccumulator()
        t0 = time.perf_counter()
        try:
            run_simulation(spaces, params, data, dt, cfg.T, forcing, tol=cfg.tol,
                           on_step=lambda st: st.m > 0 and acc.record(spaces, st),
                           diagnostics=False)
            norms = acc.norms(dt)
        except SimulationError as exc:
            report.failures[label] = str(exc)
            norms = None
        if progress is not None:
            progress(label, norms, time.perf_counter() - t0)
        results.append((label, h, norms))

    for i, (label, h, norms) in enumerate(results):
        prev = results[i - 1] if i > 0 else None
        for var in mms.ERROR_VARS:
            for norm in NORMS:
                row = {"resolution": label, "var": var, "norm": norm,
                       "error": None, "order": None, "failed": norms is None}
                if norms is not None:
                    e = norms[var][norm]
                    row["error"] = e
                    if prev is not None and prev[2] is not None:
                        e0 = prev[2][var][norm]
                        if e > 0 and e0 > 0:
                            row["order"] = math.log(e0 / e) / math.log(prev[1] / h)
                report.rows.append(row)
    return report


def check_orders(report: ErrorReport, lo, hi, norm="linf_l2", variables=mms.ERROR_VARS):
    """Asserted orders outside ``[lo, hi]`` as ``(resolution, var, order)``."""
    bad = []
    for r in report.rows:
        if r["norm"] == norm and r["var"] in variables and r["order"] is not None:
            if not lo <= r["order"] <= hi:
                bad.append((r["resolution"], r["var"], r["order"]))
    return bad


# -- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"values must be finite, got {text!r}")
    return vals


def _order_range(text):
    vals = _floats(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected lo,hi with lo <= hi, got {text!r}")
    return vals


def _positive(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--tol", type=_positive, help="relative residual tolerance of the linear solves")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="chemoflow", description="Chemotaxis-Navier-Stokes finite element runs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sim = sub.add_parser("simulate", parents=[common], help="run one simulation")
    sim.add_argument("config")
    sim.add_argument("--snapshots", type=_floats, metavar="t1,t2,...",
                     help="times at which to write VTK snapshots")
    conv = sub.add_parser("convergence", parents=[common], help="run a convergence study")
    conv.add_argument("config")
    conv.add_argument("--snapshots", type=_floats, metavar="t1,t2,...", help=argparse.SUPPRESS)
    conv.add_argument("--assert-orders", type=_order_range, metavar="lo,hi",
                      help="exit 3 unless every observed order of the checked norm lies in [lo, hi]")
    conv.add_argument("--assert-norm", choices=NORMS, default="linf_l2",
                      help="norm checked by --assert-orders (default linf_l2)")
    conv.add_argument("--assert-vars", default=",".join(mms.ERROR_VARS), metavar="v1,v2,...",
                      help="variables checked by --assert-orders (default all)")
    return parser


def _load(args, mode_ok):
    cfg = parse_config(args.config)
    if not mode_ok(cfg.mode):
        raise ConfigError(f"mode {cfg.mode} does not match the '{args.command}' command", "mode")
    return cfg.with_overrides(out_dir=args.out, tol=args.tol, snapshots=args.snapshots)


def _simulate(args) -> int:
    cfg = _load(args, lambda m: m == "simulate")
    res = run_simulate(cfg)
    _write_config(cfg)
    for path in res.files:
        print(path)
    if res.error is not None:
        print(f"solver failure: {res.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _convergence(args) -> int:
    cfg = _load(args, lambda m: m != "simulate")
    variables = tuple(v.strip() for v in args.assert_vars.split(","))
    unknown = set(variables) - set(mms.ERROR_VARS)
    if unknown:
        raise ConfigError(f"unknown variables {sorted(unknown)} in --assert-vars")

    def progress(label, norms, seconds):
        state = "failed" if norms is None else "done"
        log.info("resolution %s %s in %.1f s", label, state, seconds)

    report = run_convergence_study(cfg, progress)
    _write_config(cfg)
    print(write_convergence_csv(report.rows, os.path.join(cfg.out_dir, "convergence.csv")))
    for label, msg in report.failures.items():
        print(f"resolution {label} failed: {msg}", file=sys.stderr)
    if report.failed:
        return EXIT_SOLVER
    if args.assert_orders is not None:
        lo, hi = args.assert_orders
        bad = check_orders(report, lo, hi, args.assert_norm, variables)
        for label, var, order in bad:
            print(f"order {order:.4f} of {var} ({args.assert_norm}) at {label} outside [{lo}, {hi}]",
                  file=sys.stderr)
        if bad:
            return EXIT_ORDERS
    return EXIT_OK


def _write_config(cfg):
    write_text(os.path.join(cfg.out_dir, "config.ini"), serialize_config(cfg))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # bad flags and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return _simulate(args)
        return _convergence(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
