"""Command line interface: run, sweep, and check subcommands."""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import diagnostics, driver
from .errors import ConfigError, NumericsError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="llgadapt",
        description="Adaptive tangent-plane BDF solver for magnetization dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True, help="path to a key=value config file")
    p_sweep = sub.add_parser("sweep", help="tolerance sweep with fitted convergence slope")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", default="tol_t", choices=("tol_t", "tol_s"))
    p_sweep.add_argument("--tols", required=True,
                         help="comma-separated tolerance values")
    sub.add_parser("check", help="run the built-in invariant suite on small cases")
    return parser


def _cmd_run(args):
    cfg = driver.load_config(args.config)
    trace = driver.run(cfg)
    err = trace.err_t
    print(f"completed {trace.step_count()} steps to t={trace[-1].t}")
    if not math.isnan(err):
        print(f"err_T = {err:.6e}")
    if cfg.out_csv:
        print(f"trace written to {cfg.out_csv}")
    return EXIT_OK


def _cmd_sweep(args):
    cfg = driver.load_config(args.config)
    try:
        values = [float(v) for v in args.tols.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --tols list: {exc}") from exc
    if len(values) < 2:
        raise ConfigError("sweep needs at least two tolerance values")
    result = driver.sweep(cfg, args.param, values)
    print(f"{args.param:>12}  {'err_T':>12}  {'steps':>7}  {'max_dofs':>9}")
    for row in result["rows"]:
        print(f"{row[args.param]:12.4e}  {row['err_t']:12.4e}  "
              f"{row['steps']:7d}  {row['max_dofs']:9d}")
    print(f"fitted log-log slope: {result['slope']:.3f}")
    return EXIT_OK


def _check_bdf(rng, failures):
    from .stepping import bdf_coefficients

    worst = 0.0
    for _ in range(100):
        steps = rng.uniform(0.5, 1.5, size=3).tolist()
        for k in (1, 2, 3):
            sch = bdf_coefficients(steps, k)
            worst = max(worst, abs(float(np.sum(sch.delta))))
            ts = [0.0]
            for s in steps[-k:]:
                ts.append(ts[-1] + s)
            coeffs = rng.normal(size=k + 1)
            poly = np.polynomial.Polynomial(coeffs)
            states = [poly(t) for t in reversed(ts)]
            lhs = float(np.dot(sch.delta, states)) / steps[-1]
            worst = max(worst, abs(lhs - float(poly.deriv()(ts[-1]))))
    ok = worst <= 1e-10
    print(f"{'PASS' if ok else 'FAIL'} bdf coefficient exactness (worst {worst:.2e})")
    if not ok:
        failures.append("bdf")


def _check_marking(rng, failures):
    from itertools import combinations

    from .spaceadapt import IndicatorField, mark_coarsen, mark_refine

    bad = 0
    for _ in range(100):
        n = rng.integers(1, 9)
        eta = IndicatorField(rng.uniform(0, 1, size=n))
        theta = float(rng.uniform(0.1, 0.9))
        sq = eta.eta**2
        marked = mark_refine(eta, theta)
        need = (1 - theta) * sq.sum()
        best = None
        for r in range(n + 1):
            for sub in combinations(range(n), r):
                if sum(sq[list(sub)]) >= need:
                    best = r
                    break
            if best is not None:
                break
        if len(marked) != best or sum(sq[list(marked)]) < need - 1e-15:
            bad += 1
        marked_c = mark_coarsen(eta, theta)
        budget = (1 - theta) * sq.sum()
        best_c = 0
        for r in range(n, -1, -1):
            if any(sum(sq[list(sub)]) <= budget + 1e-15
                   for sub in combinations(range(n), r)):
                best_c = r
                break
        if len(marked_c) != best_c:
            bad += 1
    print(f"{'PASS' if bad == 0 else 'FAIL'} marking minimality/maximality ({bad} mismatches)")
    if bad:
        failures.append("marking")


def _check_mesh(rng, failures):
    from .mesh import create_rect_mesh

    root = create_rect_mesh(((0.0, 0.0), (1.0, 1.0)), 2, 2)
    ok = True
    m = root
    for _ in range(4):
        marked = [int(e) for e in rng.choice(m.n_elements, size=3, replace=False)]
        m = m.bisect(marked, 2)
        if m.check_conformity() != 0:
            ok = False
    # coarsening everything walks the forest back to the root mesh
    if not m.coarsen(range(m.n_elements)).same_topology(root):
        ok = False
    print(f"{'PASS' if ok else 'FAIL'} mesh closure/coarsening invariants")
    if not ok:
        failures.append("mesh")


def _check_stability(failures):
    from .diagnostics import stability_constants

    c1 = stability_constants(1.0)
    c2 = stability_constants(math.sqrt(2.0))
    c3 = stability_constants(1.0 + math.sqrt(2.0))
    ok = (abs(c1.s2 - 3.0) < 1e-12 and c1.eta_threshold == 0.0
          and abs(c2.eta_threshold - 0.37258) < 1e-4
          and abs(c3.s2 - 1.0) < 1e-12 and not c3.admissible)
    print(f"{'PASS' if ok else 'FAIL'} step-ratio stability algebra")
    if not ok:
        failures.append("stability")


def _cmd_check(_args):
    rng = np.random.default_rng(2024)
    failures = []
    _check_bdf(rng, failures)
    _check_marking(rng, failures)
    _check_mesh(rng, failures)
    _check_stability(failures)
    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return EXIT_NUMERICAL
    print("all checks passed")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_check(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
