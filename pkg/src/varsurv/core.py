"""Shared domain types: datasets, random-effects laws, posterior draws."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Covariance assembly order used by every module: (b0, b1, log sigma).
EFFECT_ORDER = ("b0", "b1", "log_sigma")

# Relative tolerance on the smallest eigenvalue when checking positive
# semi-definiteness; permits exact-boundary correlations with float noise.
PSD_RTOL = 1e-10


class EffectStructure(Enum):
    INTERCEPT_ONLY = "intercept_only"
    INTERCEPT_SLOPE = "intercept_slope"


class ModelError(ValueError):
    """Invalid model specification or model-level precondition failure."""


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _as_id_array(x):
    arr = np.asarray(x, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("individual_id must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LongitudinalDataset:
    """Measurement rows (individual_id, time, value), one row per measurement."""

    individual_id: np.ndarray
    time: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "individual_id", _as_id_array(self.individual_id))
        object.__setattr__(self, "time", _as_float_array(self.time, "time"))
        object.__setattr__(self, "value", _as_float_array(self.value, "value"))
        n = len(self.individual_id)
        if len(self.time) != n or len(self.value) != n:
            raise ValueError("individual_id, time and value must have equal length")
        if np.any(self.time < 0):
            raise ValueError("measurement times must be >= 0")

    def __len__(self):
        return len(self.individual_id)

    def ids(self) -> np.ndarray:
        return np.unique(self.individual_id)

    def counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.individual_id, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True)
class SurvivalDataset:
    """Follow-up rows (individual_id, followup_time, event), one row per individual."""

    individual_id: np.ndarray
    followup_time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "individual_id", _as_id_array(self.individual_id))
        object.__setattr__(
            self, "followup_time", _as_float_array(self.followup_time, "followup_time")
        )
        ev = np.asarray(self.event, dtype=bool)
        ev.setflags(write=False)
        object.__setattr__(self, "event", ev)
        n = len(self.individual_id)
        if len(self.followup_time) != n or len(self.event) != n:
            raise ValueError("survival columns must have equal length")
        if np.any(self.followup_time <= 0):
            raise ValueError("followup_time must be > 0")
        if len(np.unique(self.individual_id)) != n:
            raise ValueError("duplicate individual_id in survival dataset")

    def __len__(self):
        return len(self.individual_id)

    def n_events(self) -> int:
        return int(self.event.sum())


@dataclass(frozen=True)
class CovariateTable:
    """Baseline covariates, one row per individual, fixed column order."""

    individual_id: np.ndarray
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "individual_id", _as_id_array(self.individual_id))
        object.__setattr__(self, "names", tuple(self.names))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValueError("covariate values must be a 2-d array")
        if not np.all(np.isfinite(vals)):
            raise ValueError("covariate values contain non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.shape[0] != len(self.individual_id):
            raise ValueError("covariate rows must match individual_id length")
        if vals.shape[1] != len(self.names):
            raise ValueError("covariate columns must match names")
        if len(np.unique(self.individual_id)) != len(self.individual_id):
            raise ValueError("duplicate individual_id in covariate table")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def subset(self, names) -> "CovariateTable":
        idx = [self.names.index(n) for n in names]
        return CovariateTable(self.individual_id, tuple(names), self.values[:, idx])

    def aligned_to(self, ids: np.ndarray) -> np.ndarray:
        """Covariate matrix reordered to the given ids; every id must be present."""
        pos = {int(i): k for k, i in enumerate(self.individual_id)}
        missing = [int(i) for i in ids if int(i) not in pos]
        if missing:
            raise ValueError(f"covariate table missing individuals: {missing[:5]}")
        rows = np.array([pos[int(i)] for i in ids], dtype=int)
        return self.values[rows]


@dataclass(frozen=True)
class IndividualEffects:
    """Per-individual level (b0), optional slope (b1) and residual SD (sigma)."""

    individual_id: np.ndarray
    b0: np.ndarray
    sigma: np.ndarray
    b1: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "individual_id", _as_id_array(self.individual_id))
        object.__setattr__(self, "b0", _as_float_array(self.b0, "b0"))
        object.__setattr__(self, "sigma", _as_float_array(self.sigma, "sigma"))
        if self.b1 is not None:
            object.__setattr__(self, "b1", _as_float_array(self.b1, "b1"))
            if len(self.b1) != len(self.individual_id):
                raise ValueError("b1 length mismatch")
        if len(self.b0) != len(self.individual_id) or len(self.sigma) != len(
            self.individual_id
        ):
            raise ValueError("effects columns must have equal length")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be > 0")

    def __len__(self):
        return len(self.individual_id)


# The generate_dataset truth output is exactly an IndividualEffects table.
TruthTable = IndividualEffects


@dataclass(frozen=True)
class RandomEffectsLaw:
    """Population law of (b0[, b1], log sigma): SDs plus optional correlations.

    Fields marked absent must be exactly the ones excluded by the selected
    structure: intercept-only without/with the level-variability correlation
    uses (tau0, tau_sigma[, rho]); intercept-slope models add tau1 and rho01
    and, when correlated_with_sd, rho0sigma and rho1sigma.
    """

    structure: EffectStructure
    correlated_with_sd: bool
    mu_sigma: float
    tau0: float
    tau_sigma: float
    tau1: float | None = None
    rho: float | None = None
    rho01: float | None = None
    rho0sigma: float | None = None
    rho1sigma: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.mu_sigma):
            raise ModelError("mu_sigma must be finite")
        if not (self.tau0 > 0 and np.isfinite(self.tau0)):
            raise ModelError("tau0 must be positive")
        if not (self.tau_sigma > 0 and np.isfinite(self.tau_sigma)):
            raise ModelError("tau_sigma must be positive")
        slope = self.structure is EffectStructure.INTERCEPT_SLOPE
        required = {"tau1": slope, "rho01": slope,
                    "rho": (not slope) and self.correlated_with_sd,
                    "rho0sigma": slope and self.correlated_with_sd,
                    "rho1sigma": slope and self.correlated_with_sd}
        for name, needed in required.items():
            val = getattr(self, name)
            if needed and val is None:
                raise ModelError(f"{name} required for this structure")
            if not needed and val is not None:
                raise ModelError(f"{name} must be absent for this structure")
        if slope and not (self.tau1 > 0 and np.isfinite(self.tau1)):
            raise ModelError("tau1 must be positive")
        for name in ("rho", "rho01", "rho0sigma", "rho1sigma"):
            val = getattr(self, name)
            if val is not None and not (-1.0 <= val <= 1.0):
                raise ModelError(f"{name} must lie in [-1, 1]")

    @property
    def dimension(self) -> int:
        return 3 if self.structure is EffectStructure.INTERCEPT_SLOPE else 2

    def model_tag(self) -> str:
        """lmm1..lmm4 shorthand for the four canonical laws."""
        if self.structure is EffectStructure.INTERCEPT_ONLY:
            return "lmm2" if self.correlated_with_sd else "lmm1"
        return "lmm4" if self.correlated_with_sd else "lmm3"


def effects_covariance(law: RandomEffectsLaw) -> np.ndarray:
    """Covariance of (b0[, b1], log sigma) assembled from the law's taus and rhos.

    Raises ModelError when the assembled matrix is not positive semi-definite
    (smallest eigenvalue below -PSD_RTOL times the largest), naming the
    correlation combination responsible.
    """
    if law.structure is EffectStructure.INTERCEPT_ONLY:
        rho = law.rho if law.correlated_with_sd else 0.0
        cov = np.array(
            [
                [law.tau0**2, rho * law.tau0 * law.tau_sigma],
                [rho * law.tau0 * law.tau_sigma, law.tau_sigma**2],
            ]
        )
        rho_names = ("rho",) if law.correlated_with_sd else ()
    else:
        r01 = law.rho01
        r0s = law.rho0sigma if law.correlated_with_sd else 0.0
        r1s = law.rho1sigma if law.correlated_with_sd else 0.0
        t0, t1, ts = law.tau0, law.tau1, law.tau_sigma
        cov = np.array(
            [
                [t0**2, r01 * t0 * t1, r0s * t0 * ts],
                [r01 * t0 * t1, t1**2, r1s * t1 * ts],
                [r0s * t0 * ts, r1s * t1 * ts, ts**2],
            ]
        )
        rho_names = ("rho01", "rho0sigma", "rho1sigma") if law.correlated_with_sd else ("rho01",)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -PSD_RTOL * max(eig[-1], 1e-300):
        combo = ", ".join(f"{n}={getattr(law, n)}" for n in rho_names)
        raise ModelError(f"effects covariance not PSD for correlations ({combo})")
    return cov


def sample_effects(law: RandomEffectsLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws of (b0[, b1], log sigma) from the law; b-components zero-mean."""
    cov = effects_covariance(law)
    d = law.dimension
    mean = np.zeros(d)
    mean[-1] = law.mu_sigma
    # eigh-based square root tolerates exact-boundary (singular) laws.
    w, v = np.linalg.eigh(cov)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
    z = rng.standard_normal((n, d))
    return mean + z @ root.T


@dataclass(frozen=True)
class PopulationParams:
    """Truth/configuration bundle: fixed effects, law, associations, hazard."""

    beta: np.ndarray
    law: RandomEffectsLaw
    alpha: np.ndarray
    gamma: np.ndarray
    baseline_heights: np.ndarray
    baseline_cutpoints: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_float_array(self.beta, "beta"))
        object.__setattr__(self, "alpha", _as_float_array(self.alpha, "alpha"))
        object.__setattr__(self, "gamma", _as_float_array(self.gamma, "gamma"))
        object.__setattr__(
            self, "baseline_heights", _as_float_array(self.baseline_heights, "baseline_heights")
        )
        object.__setattr__(
            self,
            "baseline_cutpoints",
            _as_float_array(self.baseline_cutpoints, "baseline_cutpoints"),
        )
        cp = self.baseline_cutpoints
        if cp[0] != 0.0 or np.any(np.diff(cp) <= 0):
            raise ModelError("cut-points must start at 0 and strictly increase")
        if len(self.baseline_heights) != len(cp) - 1:
            raise ModelError("need one hazard height per interval")
        if np.any(self.baseline_heights <= 0):
            raise ModelError("hazard heights must be positive")


def _positive_name(name: str) -> bool:
    return name.startswith("tau") or name.startswith("h0[") or name == "sigma"


def _correlation_name(name: str) -> bool:
    return name.startswith("rho")


@dataclass(frozen=True)
class PosteriorSamples:
    """Post-burn-in, thinned MCMC draws across chains.

    draws has one column per entry of parameter_names and one row per kept
    iteration; chain_ids labels each row with its chain.
    """

    parameter_names: tuple
    draws: np.ndarray
    chain_ids: np.ndarray
    thinning: int
    burn_in: int

    def __post_init__(self):
        object.__setattr__(self, "parameter_names", tuple(self.parameter_names))
        draws = np.asarray(self.draws, dtype=float)
        if draws.ndim != 2 or draws.shape[1] != len(self.parameter_names):
            raise ValueError("draws must be (iterations, parameters)")
        if not np.all(np.isfinite(draws)):
            raise ValueError("draws contain non-finite values")
        draws.setflags(write=False)
        object.__setattr__(self, "draws", draws)
        cid = np.asarray(self.chain_ids, dtype=np.int64)
        cid.setflags(write=False)
        object.__setattr__(self, "chain_ids", cid)
        if len(cid) != draws.shape[0]:
            raise ValueError("chain_ids must label every draw")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        for j, name in enumerate(self.parameter_names):
            if _positive_name(name) and draws.shape[0] and np.any(draws[:, j] <= 0):
                raise ValueError(f"draws for SD-type parameter {name} must be positive")
            if _correlation_name(name) and draws.shape[0]:
                col = draws[:, j]
                if np.any(col < -1.0) or np.any(col > 1.0):
                    raise ValueError(f"draws for correlation {name} must lie in [-1, 1]")

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.parameter_names.index(name)]

    def n_chains(self) -> int:
        return len(np.unique(self.chain_ids))

    def by_chain(self, name: str) -> list[np.ndarray]:
        col = self.column(name)
        return [col[self.chain_ids == c] for c in np.unique(self.chain_ids)]


@dataclass(frozen=True)
class ValidationReport:
    """Cross-table consistency report; fatal problems raise instead."""

    n_measurements: dict
    survival_without_measurements: tuple
    measurements_after_followup: tuple
    covariates_missing: tuple

    @property
    def clean(self) -> bool:
        return not (
            self.survival_without_measurements
            or self.measurements_after_followup
            or self.covariates_missing
        )


def validate_dataset(
    long: LongitudinalDataset,
    surv: SurvivalDataset,
    covariates: CovariateTable | None = None,
) -> ValidationReport:
    """Check referential integrity between the longitudinal and survival tables.

    Fatal (raises ValueError): empty tables, duplicate (id, time) measurement
    pairs, longitudinal individuals missing from the survival table.
    Flagged: survival individuals with no measurements, measurements recorded
    after the individual's follow-up time, covariate rows missing.
    """
    if len(long) == 0:
        raise ValueError("longitudinal dataset is empty")
    if len(surv) == 0:
        raise ValueError("survival dataset is empty")
    order = np.lexsort((long.time, long.individual_id))
    sid, st = long.individual_id[order], long.time[order]
    dup = (sid[1:] == sid[:-1]) & (st[1:] == st[:-1])
    if np.any(dup):
        raise ValueError(
            f"duplicate (individual_id, time) measurement pairs for ids "
            f"{sorted(set(int(i) for i in sid[1:][dup]))}"
        )

    long_ids = set(int(i) for i in long.ids())
    surv_ids = set(int(i) for i in surv.individual_id)
    missing = sorted(long_ids - surv_ids)
    if missing:
        raise ValueError(f"longitudinal individuals missing from survival table: {missing}")

    followup = {int(i): float(t) for i, t in zip(surv.individual_id, surv.followup_time)}
    late = sorted(
        {
            int(i)
            for i, t in zip(long.individual_id, long.time)
            if t > followup[int(i)]
        }
    )
    no_meas = tuple(sorted(surv_ids - long_ids))
    cov_missing = ()
    if covariates is not None:
        cov_ids = set(int(i) for i in covariates.individual_id)
        cov_missing = tuple(sorted((long_ids | surv_ids) - cov_ids))
    return ValidationReport(
        n_measurements=long.counts(),
        survival_without_measurements=no_meas,
        measurements_after_followup=tuple(late),
        covariates_missing=cov_missing,
    )
