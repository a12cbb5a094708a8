"""Seeded Monte-Carlo studies of hybrid fits along an a-grid.

Replicate ``r`` draws from a Philox stream keyed by ``base_seed + r``, so the
result does not depend on execution order or the number of workers.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import divergence
from .estimator import HLProblem, fit_path
from .hfic import hfic_score, parse_focus, select_balance
from .inference import sandwich
from .models import get_model, parse_control


def parse_grid(spec) -> list[float]:
    """``lo:step:hi`` (inclusive) or an explicit list of values."""
    if isinstance(spec, str):
        lo, step, hi = (float(v) for v in spec.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad grid {spec!r}")
        k = int(math.floor((hi - lo) / step + 1e-9))
        return [round(lo + i * step, 12) for i in range(k + 1)]
    return [float(a) for a in spec]


@dataclass(frozen=True)
class SimConfig:
    B: int = 100
    n: int = 100
    dgp: dict = field(default_factory=lambda: {"name": "poisson", "rate": 1.5, "truncate": 30})
    model: str = "geometric"
    control: str = "cdf:1"
    focus: str = "control"
    a_grid: tuple = tuple(round(0.01 * i, 2) for i in range(100))
    base_seed: int = 2023
    workers: int = 1
    max_failure_rate: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "a_grid", tuple(parse_grid(self.a_grid)))
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if not self.a_grid or any(not 0.0 <= a < 1.0 for a in self.a_grid):
            raise ValueError("a_grid must be a nonempty subset of [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a_grid"] = list(self.a_grid)
        return d


class DataGenerator:
    """Sampler plus the true distribution functions needed for MSE and oracles."""

    def __init__(self, spec: dict):
        spec = dict(spec)
        self.spec = spec
        name = spec.get("name")
        self.distribution = None
        if name == "poisson":
            rate = float(spec.get("rate", 1.5))
            self.truncate = float(spec.get("truncate", 30))
            self.rate = rate
            self.distribution = divergence.poisson_distribution(rate)
            self._draw = lambda rng, n: np.minimum(rng.poisson(rate, size=n), self.truncate).astype(float)
        elif name in ("geometric", "normal", "weibull", "shifted-lognormal"):
            self.model = get_model(name)
            self.theta = np.asarray(spec["theta"], dtype=float)
            self._draw = lambda rng, n: self.model.sample(rng, self.theta, n)
            if name == "geometric":
                self.distribution = divergence.geometric_distribution(float(self.theta[0]))
        else:
            raise ValueError(f"unknown data generator {name!r}")

    def sample(self, rng, n):
        return self._draw(rng, n)

    def true_focus(self, focus_spec: str, control_spec: str) -> float:
        if focus_spec == "control":
            focus_spec = control_spec
        kind, _, arg = focus_spec.partition(":")
        if self.distribution is not None:
            if kind == "cdf":
                return self.distribution.cdf(float(arg))
            if kind == "quantile":
                cum = np.cumsum(self.distribution.probs)
                return float(self.distribution.support[np.searchsorted(cum, float(arg))])
        else:
            if kind == "cdf":
                return float(self.model.cdf(float(arg), self.theta))
            if kind == "quantile":
                return self.model.quantile(float(arg), self.theta)
        raise ValueError(f"cannot evaluate true focus {focus_spec!r}")


def _rng(config: SimConfig, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=config.base_seed + r))


def replicate_once(config: SimConfig, r: int) -> dict:
    """One simulate-fit-score pass; failures come back as tagged records."""
    dgp = DataGenerator(config.dgp)
    ys = dgp.sample(_rng(config, r), config.n)
    model = get_model(config.model)
    record = {"replicate": r, "seed": config.base_seed + r, "failed": False, "error": None}
    try:
        ef, control = parse_control(model, config.control)
        focus = parse_focus(model, config.focus, config.control)
        problem = HLProblem(model, ef, control, config.a_grid[0], ys)
        fits = fit_path(problem, config.a_grid)
        bad = [f.a for f in fits if not f.converged]
        if bad:
            raise RuntimeError(f"fit did not converge at a={bad[0]}")
        thetas, est_var, scores, focus_vals = [], [], [], []
        records = []
        for fit in fits:
            est = sandwich(fit)
            rec = hfic_score(fit, est, focus)
            records.append(rec)
            thetas.append(fit.theta_hat.tolist())
            est_var.append((config.n * np.diag(est.cov_theta)).tolist())
            scores.append(rec.score)
            focus_vals.append(rec.focus)
        a_hat = select_balance(records)
        k = config.a_grid.index(a_hat)
        record.update(theta=thetas, est_var=est_var, hfic=scores, focus=focus_vals,
                      a_hat=a_hat, focus_at_a_hat=focus_vals[k], xi_hat=float(focus.xi_hat(ys)))
    except (RuntimeError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        record.update(failed=True, error=f"{type(exc).__name__}: {exc}")
    return record


@dataclass
class SimResult:
    config: SimConfig
    grid: list
    mean_theta: np.ndarray          # (G, p)
    empirical_var: np.ndarray       # (G, p)  var of sqrt(n) theta_hat
    mean_estimated_var: np.ndarray  # (G, p)
    mean_hfic: np.ndarray           # (G,)
    empirical_mse: np.ndarray       # (G,)
    mse_se: np.ndarray              # (G,) Monte-Carlo SE of the MSE estimate
    hfic_mse_diff_se: np.ndarray    # (G,) SE of mean(HFIC - squared error)
    theta_se: np.ndarray            # (G, p) SE of mean_theta
    a_hat: np.ndarray               # (B_ok,)
    focus_at_a_hat: np.ndarray      # (B_ok,)
    true_focus: float
    mse_selected: float
    mse_a0: float
    n_ok: int
    n_failed: int
    errors: list
    limit_theta: np.ndarray | None = None

    @property
    def interior_fraction(self) -> float:
        lo, hi = self.grid[0], self.grid[-1]
        return float(np.mean((self.a_hat != lo) & (self.a_hat != hi)))

    def summary(self) -> dict:
        return {
            "schema": "hybridlik/1",
            "config": self.config.to_dict(),
            "replicates_ok": self.n_ok,
            "replicates_failed": self.n_failed,
            "true_focus": self.true_focus,
            "mse_selected": self.mse_selected,
            "mse_a0": self.mse_a0,
            "interior_fraction": self.interior_fraction,
            "errors": self.errors,
        }


def aggregate(config: SimConfig, records: list[dict]) -> SimResult:
    records = sorted(records, key=lambda rec: rec["replicate"])
    ok = [rec for rec in records if not rec["failed"]]
    failed = [rec for rec in records if rec["failed"]]
    if len(failed) > config.max_failure_rate * len(records):
        raise RuntimeError(f"{len(failed)} of {len(records)} replicates failed "
                           f"(first: {failed[0]['error']})")
    n = config.n
    theta = np.array([rec["theta"] for rec in ok])          # (B, G, p)
    est_var = np.array([rec["est_var"] for rec in ok])      # (B, G, p)
    hfic = np.array([rec["hfic"] for rec in ok])            # (B, G)
    focus = np.array([rec["focus"] for rec in ok])          # (B, G)
    dgp = DataGenerator(config.dgp)
    truth = dgp.true_focus(config.focus, config.control)
    sq = (focus - truth) ** 2
    B = len(ok)
    a_hat = np.array([rec["a_hat"] for rec in ok])
    fsel = np.array([rec["focus_at_a_hat"] for rec in ok])
    emp_var = n * theta.var(axis=0, ddof=1) if B > 1 else np.full(theta.shape[1:], np.nan)
    ddof = 1 if B > 1 else 0
    result = SimResult(
        config=config, grid=list(config.a_grid),
        mean_theta=theta.mean(axis=0),
        empirical_var=emp_var,
        mean_estimated_var=est_var.mean(axis=0),
        mean_hfic=hfic.mean(axis=0),
        empirical_mse=sq.mean(axis=0),
        mse_se=sq.std(axis=0, ddof=ddof) / math.sqrt(B),
        hfic_mse_diff_se=(hfic - sq).std(axis=0, ddof=ddof) / math.sqrt(B),
        theta_se=theta.std(axis=0, ddof=ddof) / math.sqrt(B),
        a_hat=a_hat, focus_at_a_hat=fsel, true_focus=truth,
        mse_selected=float(np.mean((fsel - truth) ** 2)),
        mse_a0=float(sq[:, 0].mean()) if config.a_grid[0] == 0.0 else math.nan,
        n_ok=B, n_failed=len(failed),
        errors=[{"replicate": rec["replicate"], "error": rec["error"]} for rec in failed],
    )
    if dgp.distribution is not None:
        model = get_model(config.model)
        ef, control = parse_control(model, config.control)
        try:
            result.limit_theta = divergence.limit_path(dgp.distribution, model, ef, control,
                                                       config.a_grid)
        except RuntimeError:
            result.limit_theta = None
    return result


def _run_chunk(args):
    config, reps = args
    return [replicate_once(config, r) for r in reps]


def run_study(config: SimConfig) -> SimResult:
    """Run all replicates (in parallel when ``workers > 1``) and aggregate."""
    reps = list(range(config.B))
    if config.workers > 1:
        chunks = [reps[i::config.workers] for i in range(config.workers)]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            records = [rec for part in pool.map(_run_chunk, [(config, c) for c in chunks]) for rec in part]
    else:
        records = [replicate_once(config, r) for r in reps]
    return aggregate(config, records)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_outputs(result: SimResult, outdir) -> list[Path]:
    """One CSV per figure panel plus ``summary.json``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    p = result.mean_theta.shape[1]
    paths = []

    def write(name, header, rows):
        path = out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(path)

    head = ["a"] + [f"mean_theta{j}" for j in range(p)] + [f"se_theta{j}" for j in range(p)]
    if result.limit_theta is not None:
        head += [f"limit_theta{j}" for j in range(p)]
    rows = []
    for k, a in enumerate(result.grid):
        row = [_fmt(a)] + [_fmt(v) for v in result.mean_theta[k]] + [_fmt(v) for v in result.theta_se[k]]
        if result.limit_theta is not None:
            row += [_fmt(v) for v in result.limit_theta[k]]
        rows.append(row)
    write("figure3_left.csv", head, rows)

    write("figure3_right.csv",
          ["a"] + [f"empirical_var{j}" for j in range(p)] + [f"mean_estimated_var{j}" for j in range(p)],
          [[_fmt(a)] + [_fmt(v) for v in result.empirical_var[k]]
           + [_fmt(v) for v in result.mean_estimated_var[k]] for k, a in enumerate(result.grid)])
    write("figure4_left.csv", ["a", "mean_hfic", "empirical_mse", "mse_se"],
          [[_fmt(a), _fmt(result.mean_hfic[k]), _fmt(result.empirical_mse[k]), _fmt(result.mse_se[k])]
           for k, a in enumerate(result.grid)])
    write("figure4_right.csv", ["replicate", "a_hat", "focus_at_a_hat"],
          [[str(i), _fmt(a), _fmt(f)] for i, (a, f) in enumerate(zip(result.a_hat, result.focus_at_a_hat))])
    path = out / "summary.json"
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(path)
    return paths
