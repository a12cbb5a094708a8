"""Command-line interface: ``hybridlik {fit,hfic,simulate,divergence,el}``.

Exit status is 0 on success, 1 for usage or input errors and 2 when a
numerical procedure fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, divergence
from .dataio import DataError, RunReport, load_csv, load_dataset, write_table
from .el import ConstraintError, solve_lambda
from .estimator import HLProblem, InfeasibleError, fit_path
from .hfic import hfic_scan, parse_focus
from .inference import sandwich, stacked_sandwich
from .models import get_model, parse_control
from .regression import RegressionProblem, fit_hybrid_regression
from .simulation import SimConfig, parse_grid, run_study, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_data(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="CSV file with a 'y' column (plus covariates for --regression)")
    src.add_argument("--dataset", help="embedded dataset name (newcomb, egypt)")


def _add_common(p, grid=True):
    p.add_argument("--model", default=None, help="weibull | normal | geometric | shifted-lognormal")
    p.add_argument("--control", default=None,
                   help="moment:l | interval:b,c | histogram:c0,...,ck | cdf:t | regression-subset")
    if grid:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--a", type=float, help="single balance parameter in [0, 1)")
        g.add_argument("--a-grid", help="grid lo:step:hi (inclusive)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="hybridlik-out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridlik", description="Hybrid parametric/empirical likelihood tools.")
    parser.add_argument("--version", action="version", version=f"hybridlik {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", help="maximum hybrid likelihood fit(s) with sandwich inference")
    _add_data(p)
    _add_common(p)
    p.add_argument("--regression", action="store_true", help="linear regression with a protected subset")
    p.add_argument("--subset", help="1-based covariate indices for the subset regression, e.g. 1,3")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("hfic", help="HFIC balance selection over an a-grid")
    _add_data(p)
    _add_common(p)
    p.add_argument("--focus", required=True, help="control | cdf:t | quantile:p")

    p = sub.add_parser("simulate", help="Monte-Carlo study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override base_seed")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default="hybridlik-out")

    p = sub.add_parser("divergence", help="large-sample limits theta(a) under a known discrete truth")
    p.add_argument("--truth", required=True, help="poisson:rate | geometric:p")
    _add_common(p)

    p = sub.add_parser("el", help="empirical likelihood test for a mean")
    _add_data(p)
    p.add_argument("--mu", type=float, required=True, help="hypothesized mean")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="hybridlik-out")
    return parser


# ---------------------------------------------------------------------------


def _dataset(args, schema="univariate"):
    if args.data:
        return load_csv(args.data, schema)
    if args.dataset:
        if schema != "univariate":
            raise UsageError("--regression needs --data")
        return load_dataset(args.dataset)
    raise UsageError("one of --data or --dataset is required")


def _grid(args, default=None):
    if getattr(args, "a", None) is not None:
        grid = [args.a]
    elif getattr(args, "a_grid", None):
        try:
            grid = parse_grid(args.a_grid)
        except ValueError as exc:
            raise UsageError(f"bad --a-grid {args.a_grid!r}: use lo:step:hi") from exc
    elif default is not None:
        grid = default
    else:
        raise UsageError("one of --a or --a-grid is required")
    if any(not 0.0 <= a < 1.0 for a in grid):
        raise UsageError("balance parameters must lie in [0, 1)")
    return grid


def _model_control(args):
    if not args.model:
        raise UsageError("--model is required")
    if not args.control:
        raise UsageError("--control is required")
    try:
        model = get_model(args.model)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    try:
        ef, control = parse_control(model, args.control)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model, ef, control


def _request(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _fit_rows(fits, level, cov_fn):
    z = stats.norm.ppf(0.5 + level / 2.0)
    rows = []
    for fit in fits:
        if not fit.converged:
            raise NumericalFailure(f"fit at a={fit.a} ended with status {fit.status.value}")
        cov = cov_fn(fit)
        se = np.sqrt(np.diag(cov))
        rows.append({"a": fit.a, "theta_hat": fit.theta_hat, "se": se,
                     "ci_lower": fit.theta_hat - z * se, "ci_upper": fit.theta_hat + z * se,
                     "covariance": cov, "lambda_hat": fit.lambda_hat, "log_hl": fit.log_hl,
                     "status": fit.status.value, "iterations": fit.iterations})
    return rows


def _write_fit_table(out, names, rows):
    header = ["a"] + list(names) + [f"se_{n}" for n in names] + ["log_hl", "status"]
    table = [[float(r["a"])] + [float(v) for v in r["theta_hat"]] + [float(v) for v in r["se"]]
             + [float(r["log_hl"]), r["status"]] for r in rows]
    return write_table(out / "fit.csv", header, table)


def cmd_fit(args):
    out = Path(args.out)
    if args.regression:
        if args.control not in (None, "regression-subset"):
            raise UsageError("--regression uses the regression-subset control")
        if not args.subset:
            raise UsageError("--regression needs --subset (1-based covariate indices)")
        ds = _dataset(args, "regression")
        try:
            S = [int(s) - 1 for s in args.subset.split(",")]
        except ValueError:
            raise UsageError(f"bad --subset {args.subset!r}") from None
        if min(S) < 0 or max(S) >= ds.X.shape[1]:
            raise UsageError(f"--subset indices must lie in 1..{ds.X.shape[1]}")
        fits = []
        for a in _grid(args):
            fits.append(fit_hybrid_regression(RegressionProblem(ds.X, ds.y, tuple(S), a)))
        rows = _fit_rows(fits, args.level, lambda f: stacked_sandwich(f).cov_theta)
        names = ["intercept"] + list(ds.columns[1:])
    else:
        ds = _dataset(args)
        model, ef, control = _model_control(args)
        problem = HLProblem(model, ef, control, 0.0, ds.y)
        fits = fit_path(problem, _grid(args))
        rows = _fit_rows(fits, args.level, lambda f: sandwich(f).cov_theta)
        names = list(model.param_names)
    _write_fit_table(out, names, rows)
    return {"dataset": ds.name, "n": ds.n, "parameters": names, "level": args.level, "fits": rows}


def cmd_hfic(args):
    out = Path(args.out)
    ds = _dataset(args)
    model, ef, control = _model_control(args)
    grid = _grid(args, default=[round(0.01 * i, 2) for i in range(100)])
    try:
        focus = parse_focus(model, args.focus, args.control)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    problem = HLProblem(model, ef, control, 0.0, ds.y)
    report = hfic_scan(problem, focus, grid)
    table = report.table()
    write_table(out / "hfic.csv", ["a", "focus", "b_hat", "kappa_hat", "tau_hat", "score"],
                [[r["a"], r["focus"], r["b_hat"], r["kappa_hat"], r["tau_hat"], r["score"]] for r in table])
    best = report.best
    return {"dataset": ds.name, "n": ds.n, "focus": focus.name, "xi_hat": report.xi_hat,
            "a_star": report.a_star, "theta_at_a_star": best.theta_hat, "focus_at_a_star": best.focus,
            "failures": report.failures, "table": table}


def cmd_simulate(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw["base_seed"] = args.seed
        if args.workers is not None:
            raw["workers"] = args.workers
        config = SimConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    result = run_study(config)
    paths = write_outputs(result, args.out)
    summary = result.summary()
    summary["files"] = [p.name for p in paths]
    return summary


def _truth(spec):
    kind, _, arg = spec.partition(":")
    try:
        value = float(arg)
    except ValueError:
        raise UsageError(f"bad --truth {spec!r}") from None
    if kind == "poisson" and value > 0:
        return divergence.poisson_distribution(value)
    if kind == "geometric" and 0 < value < 1:
        return divergence.geometric_distribution(value)
    raise UsageError(f"bad --truth {spec!r}; use poisson:rate or geometric:p")


def cmd_divergence(args):
    g = _truth(args.truth)
    model, ef, control = _model_control(args)
    grid = _grid(args)
    path = divergence.limit_path(g, model, ef, control, grid)
    values = [divergence.hybrid_divergence(g, model, ef, control, th, a) for th, a in zip(path, grid)]
    names = list(model.param_names)
    write_table(Path(args.out) / "limits.csv", ["a"] + names + ["divergence"],
                [[a] + [float(v) for v in th] + [d] for a, th, d in zip(grid, path, values)])
    return {"truth": args.truth, "grid": grid, "limit_theta": path, "divergence": values}


def cmd_el(args):
    ds = _dataset(args)
    M = (ds.y - args.mu)[:, None]
    try:
        sol = solve_lambda(M)
    except ConstraintError as exc:
        raise UsageError(str(exc)) from None
    stat = -2.0 * sol.log_el if sol.converged else math.inf
    res = {"dataset": ds.name, "n": ds.n, "mu": args.mu, "status": sol.status.value,
           "lambda": sol.lam, "log_el": sol.log_el, "neg2_log_el": stat,
           "p_value": float(stats.chi2.sf(stat, 1)) if math.isfinite(stat) else 0.0}
    write_table(Path(args.out) / "el_weights.csv", ["y", "weight"],
                [[float(y), float(w)] for y, w in zip(ds.y, sol.weights)])
    return res


COMMANDS = {"fit": cmd_fit, "hfic": cmd_hfic, "simulate": cmd_simulate,
            "divergence": cmd_divergence, "el": cmd_el}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    t0 = time.perf_counter()
    try:
        results = COMMANDS[args.command](args)
    except (UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, InfeasibleError, RuntimeError, ArithmeticError,
            np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    report = RunReport(command=args.command, request=_request(args), results=results,
                       seed=getattr(args, "seed", None), timing_seconds=time.perf_counter() - t0,
                       version=__version__)
    path = report.write(Path(args.out) / "report.json")
    print(f"wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
