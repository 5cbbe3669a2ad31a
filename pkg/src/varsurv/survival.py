"""Proportional-hazards stage: Cox regression, piecewise-constant baselines,
event-time-quantile cut-points and the separation-time (landmark) protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CovariateTable, LongitudinalDataset, SurvivalDataset

Z975 = 1.959963984540054  # standard-normal 97.5% quantile for Wald intervals


class CoxError(RuntimeError):
    pass


@dataclass(frozen=True)
class PiecewiseHazard:
    """Baseline hazard constant on (t_{k-1}, t_k]; last height extends past t_K."""

    cutpoints: np.ndarray
    heights: np.ndarray

    def __post_init__(self):
        cp = np.asarray(self.cutpoints, dtype=float)
        h = np.asarray(self.heights, dtype=float)
        if cp.ndim != 1 or len(cp) < 2 or cp[0] != 0.0 or np.any(np.diff(cp) <= 0):
            raise ValueError("cutpoints must start at 0 and strictly increase")
        if len(h) != len(cp) - 1:
            raise ValueError("need exactly one height per interval")
        if np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise ValueError("heights must be positive and finite")
        cp.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "cutpoints", cp)
        object.__setattr__(self, "heights", h)

    @property
    def n_intervals(self) -> int:
        return len(self.heights)


def exposure_matrix(ph: PiecewiseHazard, times) -> np.ndarray:
    """Per-individual time at risk inside each interval; the last interval is
    open-ended so cumulative hazards stay finite for any finite time."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    lo = ph.cutpoints[:-1]
    hi = ph.cutpoints[1:].copy()
    hi[-1] = np.inf
    return np.clip(np.minimum(t[:, None], hi[None, :]) - lo[None, :], 0.0, None)


def interval_index(ph: PiecewiseHazard, times) -> np.ndarray:
    """Index k of the interval (t_{k-1}, t_k] containing t; t > t_K maps to K-1."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    idx = np.searchsorted(ph.cutpoints, t, side="left") - 1
    return np.clip(idx, 0, ph.n_intervals - 1)


def hazard_value(ph: PiecewiseHazard, times) -> np.ndarray:
    return ph.heights[interval_index(ph, times)]


def cumulative_hazard(ph: PiecewiseHazard, t, linear_predictor=0.0):
    """exp(lp) * integral_0^t h0(u) du, evaluated analytically."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    base = exposure_matrix(ph, t_arr) @ ph.heights
    out = np.exp(np.asarray(linear_predictor, dtype=float)) * base
    return float(out[0]) if np.isscalar(t) or np.asarray(t).ndim == 0 else out


def quantile_cutpoints(event_times, K: int, t_max: float | None = None) -> np.ndarray:
    """Cut-points at the j/K empirical quantiles (type-7 interpolation) of the
    observed event times, prefixed by 0 and suffixed by the maximum follow-up."""
    ev = np.asarray(event_times, dtype=float)
    ev = ev[np.isfinite(ev)]
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(np.unique(ev)) < K:
        raise CoxError(
            f"only {len(np.unique(ev))} distinct event times; "
            f"choose K smaller than or equal to that"
        )
    if t_max is None:
        t_max = float(ev.max())
    interior = np.quantile(ev, np.arange(1, K) / K) if K > 1 else np.array([])
    cuts = np.concatenate([[0.0], interior, [t_max]])
    if np.any(np.diff(cuts) <= 0):
        raise CoxError("tied event-time quantiles; reduce K")
    return cuts


@dataclass(frozen=True)
class CoxFit:
    """Cox partial-likelihood fit: coefficients in declared covariate order."""

    names: tuple
    coefficients: np.ndarray
    standard_errors: np.ndarray
    covariance: np.ndarray
    log_partial_likelihood: float
    n_events: int

    def wald_interval(self, j: int, level_z: float = Z975):
        c, s = self.coefficients[j], self.standard_errors[j]
        return c - level_z * s, c + level_z * s

    def z_values(self) -> np.ndarray:
        return self.coefficients / self.standard_errors


def _breslow_quantities(time, event, x, beta):
    """Log partial likelihood, gradient and information (Breslow ties)."""
    order = np.argsort(time, kind="stable")
    t = time[order]
    d = event[order]
    xs = x[order]
    n, p = xs.shape
    lp = xs @ beta
    lp -= lp.max()  # guards exp overflow; cancels in every ratio
    w = np.exp(lp)
    # reverse cumulative sums: risk set of t_i = all with time >= t_i
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * xs)[::-1], axis=0)[::-1]
    pair = xs[:, :, None] * xs[:, None, :]
    s2 = np.cumsum((w[:, None, None] * pair)[::-1], axis=0)[::-1]
    # tie groups share the risk set evaluated at the first index of the group
    first = np.r_[True, t[1:] != t[:-1]]
    group_start = np.flatnonzero(first)
    group_of = np.cumsum(first) - 1
    ev_idx = np.flatnonzero(d)
    if len(ev_idx) == 0:
        raise CoxError("no events in the dataset")
    g = group_start[group_of[ev_idx]]
    s0g, s1g, s2g = s0[g], s1[g], s2[g]
    xbar = s1g / s0g[:, None]
    loglik = float(lp[ev_idx].sum() - np.log(s0g).sum())
    grad = xs[ev_idx].sum(axis=0) - xbar.sum(axis=0)
    info = (s2g / s0g[:, None, None]).sum(axis=0) - np.einsum("ij,ik->jk", xbar, xbar)
    return loglik, grad, info


def cox_fit(covariate_matrix, survival: SurvivalDataset, names=None) -> CoxFit:
    """Maximize the Cox partial likelihood by Newton-Raphson.

    Converges when the gradient max-norm drops below 1e-8 or the relative
    log-partial-likelihood change below 1e-10. Standard errors come from the
    inverse observed information. Raises CoxError on zero events, rank
    deficiency, or monotone likelihood (a standardized coefficient walking
    past 50).
    """
    x = np.asarray(covariate_matrix, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n != len(survival):
        raise ValueError("covariate rows must match survival rows")
    if names is None:
        names = tuple(f"x{j}" for j in range(p))
    names = tuple(names)
    if survival.n_events() == 0:
        raise CoxError("no events in the dataset")
    xm = x.mean(axis=0)
    xc = x - xm  # location shifts never move the partial likelihood
    sd = xc.std(axis=0, ddof=0)
    if np.any(sd == 0):
        j = int(np.flatnonzero(sd == 0)[0])
        raise CoxError(f"covariate {names[j]} is constant (rank deficient)")
    if np.linalg.matrix_rank(xc) < p:
        for j in range(p):
            others = np.delete(xc, j, axis=1)
            if np.linalg.matrix_rank(others) == np.linalg.matrix_rank(xc):
                raise CoxError(f"covariate {names[j]} is collinear (rank deficient)")
        raise CoxError("covariate matrix is rank deficient")

    time = survival.followup_time
    event = survival.event.astype(float)
    beta = np.zeros(p)
    loglik, grad, info = _breslow_quantities(time, event, xc, beta)
    for _ in range(100):
        step = np.linalg.solve(info, grad)
        factor = 1.0
        for _ in range(30):
            cand = beta + factor * step
            ll_new, g_new, i_new = _breslow_quantities(time, event, xc, cand)
            if np.isfinite(ll_new) and ll_new >= loglik - 1e-12:
                break
            factor *= 0.5
        beta, delta = cand, ll_new - loglik
        loglik, grad, info = ll_new, g_new, i_new
        if np.any(np.abs(beta) * sd > 50.0):
            j = int(np.argmax(np.abs(beta) * sd))
            raise CoxError(
                f"monotone likelihood: coefficient for {names[j]} diverges"
            )
        if np.max(np.abs(grad)) < 1e-8 or abs(delta) < 1e-10 * (abs(loglik) + 1e-10):
            break
    else:
        raise CoxError("Newton-Raphson failed to converge in 100 iterations")
    cov = np.linalg.inv(info)
    return CoxFit(
        names=names,
        coefficients=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        covariance=cov,
        log_partial_likelihood=loglik,
        n_events=survival.n_events(),
    )


def two_stage_fit(
    stage1,
    survival: SurvivalDataset,
    extra_covariates: CovariateTable | None = None,
) -> CoxFit:
    """Cox fit on the stage-one (level, sd[, slope]) estimates plus optional
    baseline covariates; the sd coordinate is the variability log hazard ratio.
    """
    ids = np.asarray(stage1.individual_id)
    surv_pos = {int(i): k for k, i in enumerate(survival.individual_id)}
    missing = [int(i) for i in ids if int(i) not in surv_pos]
    if missing:
        raise ValueError(f"stage-one individuals missing from survival data: {missing[:5]}")
    rows = np.array([surv_pos[int(i)] for i in ids], dtype=int)
    sub = SurvivalDataset(
        individual_id=survival.individual_id[rows],
        followup_time=survival.followup_time[rows],
        event=survival.event[rows],
    )
    cols = [np.asarray(stage1.level, dtype=float), np.asarray(stage1.sd, dtype=float)]
    names = ["level", "sd"]
    if getattr(stage1, "slope", None) is not None:
        cols.append(np.asarray(stage1.slope, dtype=float))
        names.append("slope")
    if extra_covariates is not None:
        w = extra_covariates.aligned_to(ids)
        cols.extend(w[:, j] for j in range(w.shape[1]))
        names.extend(extra_covariates.names)
    return cox_fit(np.column_stack(cols), sub, names=tuple(names))


def landmark_split(
    long: LongitudinalDataset, surv: SurvivalDataset, t_sep: float
) -> tuple[LongitudinalDataset, SurvivalDataset]:
    """Separate measurement follow-up from survival follow-up at t_sep.

    Measurements taken at or after t_sep are dropped; individuals whose
    follow-up ends at or before t_sep are dropped; surviving individuals'
    times restart at zero (conditional on surviving to t_sep).
    """
    if t_sep < 0:
        raise ValueError("t_sep must be >= 0")
    alive = surv.followup_time > t_sep
    if not alive.any():
        raise ValueError(f"no individuals under follow-up after t_sep={t_sep}")
    alive_ids = set(int(i) for i in surv.individual_id[alive])
    keep = (long.time < t_sep) & np.fromiter(
        (int(i) in alive_ids for i in long.individual_id), bool, len(long)
    )
    if not keep.any():
        raise ValueError("no measurements remain before t_sep")
    new_long = LongitudinalDataset(
        individual_id=long.individual_id[keep],
        time=long.time[keep],
        value=long.value[keep],
    )
    new_surv = SurvivalDataset(
        individual_id=surv.individual_id[alive],
        followup_time=surv.followup_time[alive] - t_sep,
        event=surv.event[alive],
    )
    return new_long, new_surv
