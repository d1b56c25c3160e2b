"""Metrics, penalty-weight tuning, and the replication benchmark harness.

A benchmark replication generates a dataset, splits it 50/25/25, removes
items from training to hit the requested cold-start severity, tunes each
method's penalty weight on the validation part, and scores the tuned fit on
the test part.  Means and standard errors are aggregated across
replications.
"""

import json
import time
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .baselines import fit_cpd, fit_gcpd, fit_mf, grand_mean_baseline
from .factor_model import SubgroupMap
from .rem_solver import FitConfig, NumericalError, fit_rem
from .simgen import (Sim1Params, Sim2Params, generate_simulation1,
                     generate_simulation2, inject_cold_start,
                     replication_seeds)
from .tensor_core import DatasetSplit, split_dataset

KNOWN_METHODS = ("rem", "cpd", "gcpd", "mf", "gmi")


def rmse(predictions, actuals) -> float:
    """Root mean squared error over paired value sequences."""
    p = np.asarray(predictions, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise ValueError("predictions and actuals must be 1-d and equal length")
    if p.size == 0:
        raise ValueError("empty input")
    diff = p - a
    return float(np.sqrt(diff @ diff / p.size))


def mae(predictions, actuals) -> float:
    """Mean absolute error over paired value sequences."""
    p = np.asarray(predictions, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1:
        raise ValueError("predictions and actuals must be 1-d and equal length")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(p - a)))


def _fit_method(method: str, train, config: FitConfig,
                subgroups: Optional[SubgroupMap], gcpd_cells: str = "cross"):
    if method == "rem":
        if subgroups is None:
            raise ValueError("rem needs a subgroup map")
        return fit_rem(train, subgroups, config)
    if method == "cpd":
        return fit_cpd(train, config)
    if method == "gcpd":
        if subgroups is None:
            raise ValueError("gcpd needs a subgroup map")
        return fit_gcpd(train, subgroups, config, cells=gcpd_cells)
    if method == "mf":
        return fit_mf(train, config, subgroups)
    if method == "gmi":
        return grand_mean_baseline(train)
    raise ValueError(f"unknown method {method!r}")


def _tune(method: str, grid, split: DatasetSplit, config: FitConfig,
          subgroups: Optional[SubgroupMap], gcpd_cells: str = "cross"):
    """Grid search on validation RMSE.  Returns (best lam, table, best fit);
    the fitted predictor is kept so callers need not refit."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty tuning grid")
    val_idx = split.validation.idx0 + 1
    table: Dict[float, float] = {}
    best_lam = None
    best_r = np.inf
    best_fit = None
    failures = 0
    for lam in grid:
        try:
            fitted = _fit_method(method, split.train,
                                 replace(config, lam=lam), subgroups,
                                 gcpd_cells)
            r = rmse(fitted.predict(val_idx), split.validation.values)
        except NumericalError:
            failures += 1
            table[lam] = float("inf")
            continue
        table[lam] = r
        # strict improvement beyond 1e-12 so ties keep the smaller weight
        if r < best_r - 1e-12:
            best_r = r
            best_lam = lam
            best_fit = fitted
    if best_fit is None:
        raise NumericalError(f"{method}: every fit on the grid diverged")
    return best_lam, table, best_fit


def tune_lambda(method: str, grid, split: DatasetSplit, config: FitConfig,
                subgroups: Optional[SubgroupMap] = None,
                gcpd_cells: str = "cross"):
    """Pick the penalty weight minimizing validation RMSE (ties go to the
    smallest weight).  Returns (best lam, {lam: validation rmse})."""
    best_lam, table, _ = _tune(method, grid, split, config, subgroups,
                               gcpd_cells)
    return best_lam, table


@dataclass(frozen=True)
class BenchmarkSpec:
    """One benchmark setting: a generator design plus the evaluation
    protocol."""

    design: str  # "sim1" or "sim2"
    pi0: float
    phi_cs: float
    methods: Tuple[str, ...] = ("rem", "cpd", "gcpd", "mf", "gmi")
    lambda_grid: Tuple[float, ...] = tuple(float(v) for v in range(1, 12))
    rank: int = 3
    replications: int = 10
    base_seed: int = 0
    n_users: int = 500
    ratios: Tuple[float, float, float] = (0.5, 0.25, 0.25)
    noise_sd: float = 1.0
    tol: float = 1e-4
    max_iter: int = 1000
    init_scale: float = 0.1
    n_workers: int = 1
    gcpd_cells: str = "cross"

    def __post_init__(self):
        if self.design not in ("sim1", "sim2"):
            raise ValueError("design must be 'sim1' or 'sim2'")
        if self.gcpd_cells not in ("cross", "mode1"):
            raise ValueError("gcpd_cells must be 'cross' or 'mode1'")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if not self.lambda_grid:
            raise ValueError("tuning grid must be nonempty")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}")


@dataclass
class BenchmarkReport:
    """Per-method test metrics across replications."""

    spec: BenchmarkSpec
    rmse_values: Dict[str, List[float]]
    mae_values: Dict[str, List[float]]
    lambdas: Dict[str, List[Optional[float]]]
    time_s: Dict[str, float]
    completed: int
    failures: List[str]

    def stats(self, method: str) -> dict:
        r = np.asarray(self.rmse_values[method])
        m = np.asarray(self.mae_values[method])
        n = r.size
        out = {
            "rmse_mean": float(r.mean()),
            "mae_mean": float(m.mean()),
            "rmse_se": float(r.std(ddof=1) / np.sqrt(n)) if n > 1 else None,
            "mae_se": float(m.std(ddof=1) / np.sqrt(n)) if n > 1 else None,
            "time_s": self.time_s[method],
        }
        return out

    def to_delimited(self) -> str:
        cols = ["method", "rmse_mean", "rmse_se", "mae_mean", "mae_se",
                "time_s"]
        lines = ["\t".join(cols)]
        for method in self.spec.methods:
            s = self.stats(method)
            row = [method]
            for c in cols[1:]:
                v = s[c]
                row.append("-" if v is None else "%.6g" % v)
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = (f"design={self.spec.design} pi0={self.spec.pi0} "
                f"phi={self.spec.phi_cs} reps={self.completed}")
        lines = [head, ""]
        lines.append(f"{'method':<8}{'rmse':>12}{'(se)':>10}{'mae':>12}"
                     f"{'(se)':>10}{'time[s]':>10}")
        for method in self.spec.methods:
            s = self.stats(method)
            se_r = "-" if s["rmse_se"] is None else "%.3f" % s["rmse_se"]
            se_m = "-" if s["mae_se"] is None else "%.3f" % s["mae_se"]
            lines.append(f"{method:<8}{s['rmse_mean']:>12.4f}{se_r:>10}"
                         f"{s['mae_mean']:>12.4f}{se_m:>10}"
                         f"{s['time_s']:>10.1f}")
        return "\n".join(lines) + "\n"

    def save(self, outdir):
        import os
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "report.tsv"), "w") as fh:
            fh.write(self.to_delimited())
        with open(os.path.join(outdir, "report.txt"), "w") as fh:
            fh.write(self.to_table())
        manifest = {
            "spec": asdict(self.spec),
            "completed": self.completed,
            "failures": self.failures,
            "lambdas": self.lambdas,
            "versions": _versions(),
        }
        with open(os.path.join(outdir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)


def _versions() -> dict:
    import numba
    from . import __version__
    return {"tenrec": __version__, "numpy": np.__version__,
            "numba": numba.__version__}


def _generate_for(spec: BenchmarkSpec, data_seed: int):
    if spec.design == "sim1":
        params = Sim1Params(pi0=spec.pi0, phi_cs=spec.phi_cs,
                            rank=spec.rank, noise_sd=spec.noise_sd,
                            seed=data_seed)
        return generate_simulation1(params)
    params = Sim2Params(n_users=spec.n_users, pi0=spec.pi0,
                        phi_cs=spec.phi_cs, rank=spec.rank,
                        noise_sd=spec.noise_sd, seed=data_seed)
    return generate_simulation2(params)


def run_benchmark(spec: BenchmarkSpec) -> BenchmarkReport:
    """Run the full replication protocol for one setting.

    Replication failures are recorded and excluded if fewer than 20% of
    replications fail; otherwise the run aborts.
    """
    config = FitConfig(rank=spec.rank, lam=1.0, tol=spec.tol,
                       max_iter=spec.max_iter, init_scale=spec.init_scale,
                       n_workers=spec.n_workers)
    rmse_values: Dict[str, List[float]] = {m: [] for m in spec.methods}
    mae_values: Dict[str, List[float]] = {m: [] for m in spec.methods}
    lambdas: Dict[str, List[Optional[float]]] = {m: [] for m in spec.methods}
    time_s: Dict[str, float] = {m: 0.0 for m in spec.methods}
    failures: List[str] = []
    for rep in range(spec.replications):
        data_seed, split_seed, inject_seed = replication_seeds(spec.base_seed,
                                                               rep)
        try:
            tensor, sg, _truth = _generate_for(spec, data_seed)
            split = split_dataset(tensor, spec.ratios, split_seed)
            split = inject_cold_start(split, spec.phi_cs, inject_seed)
            test_idx = split.test.idx0 + 1
            rep_rmse = {}
            rep_mae = {}
            rep_lam = {}
            rep_time = {}
            for method in spec.methods:
                t0 = time.perf_counter()
                if method == "gmi":
                    fitted = grand_mean_baseline(split.train)
                    lam_star = None
                else:
                    lam_star, _table, fitted = _tune(
                        method, spec.lambda_grid, split, config, sg,
                        spec.gcpd_cells)
                preds = fitted.predict(test_idx)
                rep_rmse[method] = rmse(preds, split.test.values)
                rep_mae[method] = mae(preds, split.test.values)
                rep_lam[method] = lam_star
                rep_time[method] = time.perf_counter() - t0
        except (NumericalError, ValueError) as exc:
            failures.append(f"replication {rep}: {exc}")
            continue
        for method in spec.methods:
            rmse_values[method].append(rep_rmse[method])
            mae_values[method].append(rep_mae[method])
            lambdas[method].append(rep_lam[method])
            time_s[method] += rep_time[method]
    completed = spec.replications - len(failures)
    if completed == 0 or len(failures) / spec.replications >= 0.2:
        raise RuntimeError(
            f"{len(failures)}/{spec.replications} replications failed: "
            + "; ".join(failures)
        )
    if failures:
        warnings.warn(f"excluded {len(failures)} failed replication(s)")
    return BenchmarkReport(spec=spec, rmse_values=rmse_values,
                           mae_values=mae_values, lambdas=lambdas,
                           time_s=time_s, completed=completed,
                           failures=failures)
