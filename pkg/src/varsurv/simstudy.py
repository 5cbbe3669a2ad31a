"""Replication harness: bias, SD, RMSE and coverage per method, plus the
omitted-correlation bias formula for plain linear regression."""

from __future__ import annotations

import dataclasses
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import SimConfig, generate_dataset
from .joint import JointSpec, fit_joint
from .lmm import LmmSpec, PriorSpec, fit_lmm
from .mcmc import McmcSettings
from .naive import naive_table
from .survival import CoxFit, cox_fit, two_stage_fit

KNOWN_METHODS = (
    "true-values",
    "naive",
    "lmm1",
    "lmm2",
    "lmm3",
    "lmm4",
    "jm1",
    "jm2",
    "jm3",
    "jm4",
)

PARAMETERS = ("alpha0", "alpha_sigma")


@dataclass(frozen=True)
class StudyGrid:
    """Cartesian sweep over SimConfig fields, replicated n_replications times."""

    base: SimConfig
    vary: dict = field(default_factory=dict)
    methods: tuple = ("true-values", "naive", "lmm2", "jm2")
    n_replications: int = 200
    min_measurements: int = 2
    naive_sample_sd: bool = True
    K: int = 15
    n_chains: int = 2
    lmm_burn_in: int = 1000
    lmm_samples: int = 1000
    lmm_thinning: int = 1
    jm_burn_in: int = 2000
    jm_samples: int = 1000
    jm_thinning: int = 4

    def __post_init__(self):
        if self.n_replications < 1:
            raise ValueError("n_replications must be >= 1")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        for name in self.vary:
            if not hasattr(self.base, name):
                raise ValueError(f"vary names unknown SimConfig field {name!r}")

    def grid_points(self) -> list:
        """(label, SimConfig) pairs in deterministic order."""
        if not self.vary:
            return [("defaults", self.base)]
        keys = sorted(self.vary)
        points = []
        for combo in itertools.product(*(self.vary[k] for k in keys)):
            updates = dict(zip(keys, combo))
            label = ",".join(f"{k}={v}" for k, v in updates.items())
            points.append((label, dataclasses.replace(self.base, **updates)))
        return points


@dataclass(frozen=True)
class EstimateRecord:
    """One (replication, method, parameter) point estimate with its interval."""

    grid_index: int
    grid_label: str
    replication: int
    method: str
    parameter: str
    truth: float
    estimate: float
    lower: float
    upper: float
    status: str = "ok"


@dataclass(frozen=True)
class MetricsRow:
    grid_index: int
    grid_label: str
    method: str
    parameter: str
    true_value: float
    mean_estimate: float
    sd_estimate: float
    rmse: float
    coverage: float
    n_used: int
    n_failed: int
    flagged: bool


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple

    def __iter__(self):
        return iter(self.rows)

    def row(self, method: str, parameter: str, grid_label: str | None = None) -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.parameter == parameter:
                if grid_label is None or r.grid_label == grid_label:
                    return r
        raise KeyError((method, parameter, grid_label))


def metrics(estimates, intervals, truth: float) -> dict:
    """Mean, sample SD (R-1), RMSE around the truth and interval coverage.

    With a single estimate the SD (and hence nothing else) is undefined and
    reported as NaN so aggregations can flag it rather than hide it.
    """
    est = np.asarray(estimates, dtype=float)
    if len(est) == 0:
        raise ValueError("metrics needs at least one estimate")
    lo = np.array([iv[0] for iv in intervals], dtype=float)
    hi = np.array([iv[1] for iv in intervals], dtype=float)
    if len(lo) != len(est):
        raise ValueError("one interval per estimate required")
    mean = float(est.mean())
    sd = float(est.std(ddof=1)) if len(est) > 1 else float("nan")
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    coverage = float(np.mean((lo <= truth) & (truth <= hi)))
    return {"mean": mean, "sd": sd, "rmse": rmse, "coverage": coverage}


def omitted_correlation_bias(beta1: float, sigma1: float, sigma2: float, rho: float) -> float:
    """Asymptotic bias in the second coefficient when a correlated first
    covariate is omitted from a linear regression: rho * beta1 * sigma1/sigma2."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return rho * beta1 * sigma1 / sigma2


# ---------------------------------------------------------------------------
# Replication machinery
# ---------------------------------------------------------------------------


def _rep_seed(base_seed: int, grid_index: int, rep: int, stream: int) -> int:
    ss = np.random.SeedSequence(entropy=(int(base_seed) % 2**64, grid_index, rep, stream))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _wald_records(fit: CoxFit, common: dict, truth_values: dict) -> list:
    out = []
    for par, cov_name in zip(PARAMETERS, ("level", "sd")):
        j = fit.names.index(cov_name)
        lo, hi = fit.wald_interval(j)
        out.append(
            EstimateRecord(
                **common,
                parameter=par,
                truth=truth_values[par],
                estimate=float(fit.coefficients[j]),
                lower=float(lo),
                upper=float(hi),
            )
        )
    return out


def _failed_records(common: dict, truth_values: dict, reason: str) -> list:
    return [
        EstimateRecord(
            **common,
            truth=truth_values[par],
            parameter=par,
            estimate=float("nan"),
            lower=float("nan"),
            upper=float("nan"),
            status=f"failed: {reason}",
        )
        for par in PARAMETERS
    ]


def run_replication(grid: StudyGrid, grid_index: int, rep: int) -> list:
    """All methods on one generated dataset; failures become flagged records."""
    label, config = grid.grid_points()[grid_index]
    config = dataclasses.replace(
        config, seed=_rep_seed(grid.base.seed, grid_index, rep, 0)
    )
    data = generate_dataset(config)
    truth_values = {"alpha0": config.alpha0, "alpha_sigma": config.alpha_sigma}
    records: list = []
    for k, method in enumerate(grid.methods):
        common = dict(
            grid_index=grid_index,
            grid_label=label,
            replication=rep,
            method=method,
        )
        mcmc_seed = _rep_seed(grid.base.seed, grid_index, rep, 1 + k)
        try:
            records.extend(
                _run_method(method, data, grid, truth_values, common, mcmc_seed)
            )
        except Exception as exc:  # failures are reported, never silently dropped
            records.extend(_failed_records(common, truth_values, str(exc)))
    return records


def _run_method(method, data, grid: StudyGrid, truth_values, common, mcmc_seed):
    long, surv, truth = data.longitudinal, data.survival, data.truth
    if method == "true-values":
        x = np.column_stack([truth.b0, truth.sigma])
        fit = cox_fit(x, surv, names=("level", "sd"))
        return _wald_records(fit, common, truth_values)
    if method == "naive":
        stage1 = naive_table(
            long,
            min_measurements=grid.min_measurements,
            sample_sd=grid.naive_sample_sd,
        )
        fit = two_stage_fit(stage1, surv)
        return _wald_records(fit, common, truth_values)
    if method.startswith("lmm"):
        spec = LmmSpec.from_name(method)
        settings = McmcSettings(
            n_chains=grid.n_chains,
            burn_in=grid.lmm_burn_in,
            n_samples=grid.lmm_samples,
            thinning=grid.lmm_thinning,
            seed=mcmc_seed,
        )
        lmm_fit = fit_lmm(long, spec, PriorSpec(), settings)
        fit = two_stage_fit(lmm_fit.stage1, surv)
        return _wald_records(fit, common, truth_values)
    if method.startswith("jm"):
        spec = JointSpec.from_name(method, K=grid.K)
        settings = McmcSettings(
            n_chains=grid.n_chains,
            burn_in=grid.jm_burn_in,
            n_samples=grid.jm_samples,
            thinning=grid.jm_thinning,
            seed=mcmc_seed,
        )
        jfit = fit_joint(long, surv, None, spec, PriorSpec(), settings)
        out = []
        for par, assoc in zip(PARAMETERS, ("level", "sd")):
            mean, _, lo, hi = jfit.alpha_summary(assoc)
            out.append(
                EstimateRecord(
                    **common,
                    parameter=par,
                    truth=truth_values[par],
                    estimate=mean,
                    lower=lo,
                    upper=hi,
                )
            )
        return out
    raise ValueError(f"unknown method {method!r}")


def aggregate(records) -> MetricsTable:
    """Reduce estimate records to one MetricsRow per (grid point, method,
    parameter); failed replications are excluded from the statistics, counted,
    and grid points with more than 5% failures are flagged."""
    records = sorted(
        records, key=lambda r: (r.grid_index, r.replication, r.method, r.parameter)
    )
    keys = sorted(
        {(r.grid_index, r.grid_label, r.method, r.parameter) for r in records}
    )
    rows = []
    for gi, label, method, par in keys:
        sub = [
            r
            for r in records
            if (r.grid_index, r.method, r.parameter) == (gi, method, par)
        ]
        ok = [r for r in sub if r.status == "ok"]
        n_failed = len(sub) - len(ok)
        if not ok:
            rows.append(
                MetricsRow(
                    grid_index=gi,
                    grid_label=label,
                    method=method,
                    parameter=par,
                    true_value=sub[0].truth,
                    mean_estimate=float("nan"),
                    sd_estimate=float("nan"),
                    rmse=float("nan"),
                    coverage=float("nan"),
                    n_used=0,
                    n_failed=n_failed,
                    flagged=True,
                )
            )
            continue
        truth = ok[0].truth
        stats = metrics(
            [r.estimate for r in ok], [(r.lower, r.upper) for r in ok], truth
        )
        flagged = n_failed > 0.05 * max(len(sub), 1) or len(ok) < 2
        rows.append(
            MetricsRow(
                grid_index=gi,
                grid_label=label,
                method=method,
                parameter=par,
                true_value=truth,
                mean_estimate=stats["mean"],
                sd_estimate=stats["sd"],
                rmse=stats["rmse"],
                coverage=stats["coverage"],
                n_used=len(ok),
                n_failed=n_failed,
                flagged=flagged,
            )
        )
    return MetricsTable(rows=tuple(rows))


def _worker(args):
    grid, gi, rep = args
    return run_replication(grid, gi, rep)


def run_study(
    grid: StudyGrid,
    parallelism: int = 1,
    completed: set | None = None,
    existing_records=(),
    progress=None,
) -> tuple:
    """Run every (grid point, replication) task and aggregate.

    Each task derives its random streams from (base seed, grid index,
    replication) alone, so results are identical for any parallelism and any
    scheduling. `completed` + `existing_records` resume an interrupted run
    from a raw-estimates file.

    Returns (MetricsTable, records).
    """
    points = grid.grid_points()
    completed = completed or set()
    tasks = [
        (grid, gi, rep)
        for gi in range(len(points))
        for rep in range(grid.n_replications)
        if (gi, rep) not in completed
    ]
    records = list(existing_records)
    if parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for out in pool.map(_worker, tasks, chunksize=1):
                records.extend(out)
                if progress is not None:
                    progress(out)
    else:
        for task in tasks:
            out = _worker(task)
            records.extend(out)
            if progress is not None:
                progress(out)
    return aggregate(records), records
