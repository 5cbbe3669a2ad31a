"""Mixed location-scale models: per-individual levels (and slopes) plus a
random residual SD, fitted by Metropolis-within-Gibbs.

Sampler parameterization: the levels are held in hierarchically centered form
c0_i = beta^T X_i + b0_i (and c1_i = beta_t + b1_i), which is the same model
with far better mixing when the between-individual SD dominates the residual
SD. The public log-posterior below keeps the zero-mean-effects form; the two
differ by a deterministic linear change of variables only.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    CovariateTable,
    EffectStructure,
    IndividualEffects,
    LongitudinalDataset,
    RandomEffectsLaw,
    effects_covariance,
)
from .mcmc import (
    GibbsBlock,
    McmcResult,
    McmcSettings,
    RWBlock,
    gelman_rubin,
    run_chains,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class LmmError(RuntimeError):
    pass


@dataclass(frozen=True)
class LmmSpec:
    """Which mixed location-scale model to fit.

    include_slope_fixed_effect is derived: a fixed time slope is present
    exactly when the random-effect structure carries slopes.
    """

    structure: EffectStructure = EffectStructure.INTERCEPT_ONLY
    correlated_with_sd: bool = True
    fixed_covariates: tuple = ()

    @property
    def include_slope_fixed_effect(self) -> bool:
        return self.structure is EffectStructure.INTERCEPT_SLOPE

    @property
    def n_location_effects(self) -> int:
        return 2 if self.include_slope_fixed_effect else 1

    @classmethod
    def from_name(cls, name: str, fixed_covariates=()) -> "LmmSpec":
        table = {
            "lmm1": (EffectStructure.INTERCEPT_ONLY, False),
            "lmm2": (EffectStructure.INTERCEPT_ONLY, True),
            "lmm3": (EffectStructure.INTERCEPT_SLOPE, False),
            "lmm4": (EffectStructure.INTERCEPT_SLOPE, True),
        }
        if name not in table:
            raise LmmError(f"unknown mixed-model name {name!r}")
        structure, corr = table[name]
        return cls(structure=structure, correlated_with_sd=corr,
                   fixed_covariates=tuple(fixed_covariates))

    def model_name(self) -> str:
        if self.structure is EffectStructure.INTERCEPT_ONLY:
            return "lmm2" if self.correlated_with_sd else "lmm1"
        return "lmm4" if self.correlated_with_sd else "lmm3"


@dataclass(frozen=True)
class PriorSpec:
    """Diffuse reference priors: U[0, sd_upper] on SDs, U[-1, 1] on
    correlations, N(0, location_sd^2) on every location-type parameter."""

    sd_upper: float = 100.0
    location_sd: float = 100.0

    def __post_init__(self):
        if self.sd_upper <= 0 or self.location_sd <= 0:
            raise ValueError("prior scales must be positive")


@dataclass(frozen=True)
class Stage1Estimates:
    """Per-individual posterior means the stage-two hazard model consumes.

    level is reported on the outcome scale (fixed intercept + random
    intercept); sd is the posterior mean of the residual SD itself.
    """

    individual_id: np.ndarray
    level: np.ndarray
    sd: np.ndarray
    slope: np.ndarray | None = None
    excluded: tuple = ()

    def __len__(self):
        return len(self.individual_id)


@dataclass(frozen=True)
class LmmParams:
    """Population parameters for log-posterior evaluation."""

    beta: np.ndarray
    law: RandomEffectsLaw
    beta_t: float | None = None


def _prior_logdensity(params: LmmParams, priors: PriorSpec) -> float:
    law = params.law
    lp = -0.5 * float(np.sum(np.asarray(params.beta) ** 2)) / priors.location_sd**2
    if params.beta_t is not None:
        lp += -0.5 * params.beta_t**2 / priors.location_sd**2
    lp += -0.5 * law.mu_sigma**2 / priors.location_sd**2
    for tau in (law.tau0, law.tau1, law.tau_sigma):
        if tau is None:
            continue
        if not 0 < tau <= priors.sd_upper:
            return -np.inf
        lp += -np.log(priors.sd_upper)
    for rho in (law.rho, law.rho01, law.rho0sigma, law.rho1sigma):
        if rho is None:
            continue
        if not -1.0 <= rho <= 1.0:
            return -np.inf
        lp += -np.log(2.0)
    return lp


def lmm_log_posterior_parts(
    params: LmmParams,
    effects: IndividualEffects,
    data: LongitudinalDataset,
    spec: LmmSpec,
    priors: PriorSpec,
    covariates: CovariateTable | None = None,
):
    """(data, random-effects, prior) log-density parts; effects use the
    zero-mean convention of the model equations."""
    law = params.law
    if (law.structure is EffectStructure.INTERCEPT_SLOPE) != (
        spec.structure is EffectStructure.INTERCEPT_SLOPE
    ):
        raise LmmError("law structure does not match the model spec")
    ids = effects.individual_id
    pos = {int(i): k for k, i in enumerate(ids)}
    try:
        row = np.array([pos[int(i)] for i in data.individual_id], dtype=int)
    except KeyError as exc:
        raise LmmError(f"no effects supplied for individual {exc.args[0]}") from None
    x = np.ones((len(ids), 1))
    if spec.fixed_covariates:
        if covariates is None:
            raise LmmError("spec selects fixed covariates but none were supplied")
        x = np.column_stack([x, covariates.subset(spec.fixed_covariates).aligned_to(ids)])
    beta = np.asarray(params.beta, dtype=float)
    if len(beta) != x.shape[1]:
        raise LmmError("beta length does not match intercept + fixed covariates")
    mean_i = x @ beta + effects.b0
    mean = mean_i[row]
    if spec.include_slope_fixed_effect:
        if effects.b1 is None or params.beta_t is None:
            raise LmmError("slope model needs b1 effects and beta_t")
        mean = mean + (params.beta_t + effects.b1[row]) * data.time
    sig = effects.sigma[row]
    res = data.value - mean
    row_ll = -0.5 * LOG_2PI - np.log(sig) - 0.5 * (res / sig) ** 2
    if not np.all(np.isfinite(row_ll)):
        bad = int(data.individual_id[~np.isfinite(row_ll)][0])
        raise LmmError(f"non-finite data log-density for individual {bad}")
    data_part = float(row_ll.sum())

    cov = effects_covariance(law)
    d = law.dimension
    r = np.empty((len(ids), d))
    r[:, 0] = effects.b0
    if d == 3:
        r[:, 1] = effects.b1
    r[:, -1] = np.log(effects.sigma) - law.mu_sigma
    chol = np.linalg.cholesky(cov)
    # forward-solve L y = r^T, quadratic form = sum(y^2)
    y = np.linalg.solve(chol, r.T)
    quad = np.sum(y**2, axis=0)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    eff_ll = -0.5 * (d * LOG_2PI + logdet + quad)
    if not np.all(np.isfinite(eff_ll)):
        bad = int(ids[~np.isfinite(eff_ll)][0])
        raise LmmError(f"non-finite effects log-density for individual {bad}")
    effects_part = float(eff_ll.sum())
    prior_part = _prior_logdensity(params, priors)
    return data_part, effects_part, prior_part


def lmm_log_posterior(params, effects, data, spec, priors, covariates=None) -> float:
    """Joint log density of data, random effects and priors (up to nothing)."""
    return float(sum(lmm_log_posterior_parts(params, effects, data, spec, priors, covariates)))


# ---------------------------------------------------------------------------
# Sampler kernel shared by the mixed-model and joint-model fits
# ---------------------------------------------------------------------------


class MlsKernel:
    """Per-individual sufficient statistics and conditional updates.

    Holds everything both samplers share: the centered-state layout, the
    conjugate draws for locations and fixed effects, the random-walk targets
    for the log residual SDs and the population hyperparameters.
    """

    def __init__(self, long, spec, priors, covariates=None, ids=None):
        self.spec = spec
        self.priors = priors
        if ids is None:
            ids = long.ids()
        self.ids = np.asarray(ids, dtype=np.int64)
        m = len(self.ids)
        pos = {int(i): k for k, i in enumerate(self.ids)}
        try:
            idx = np.array([pos[int(i)] for i in long.individual_id], dtype=int)
        except KeyError as exc:
            raise LmmError(f"individual {exc.args[0]} not in the fitted id set") from None
        t, y = long.time, long.value
        self.n = np.bincount(idx, minlength=m).astype(float)
        self.sy = np.bincount(idx, weights=y, minlength=m)
        self.syy = np.bincount(idx, weights=y * y, minlength=m)
        self.st = np.bincount(idx, weights=t, minlength=m)
        self.stt = np.bincount(idx, weights=t * t, minlength=m)
        self.sty = np.bincount(idx, weights=t * y, minlength=m)
        self.m = m
        self.q = spec.n_location_effects
        self.d = self.q + 1
        x = np.ones((m, 1))
        self.covariate_names = tuple(spec.fixed_covariates)
        if spec.fixed_covariates:
            if covariates is None:
                raise LmmError("spec selects fixed covariates but none were supplied")
            x = np.column_stack(
                [x, covariates.subset(spec.fixed_covariates).aligned_to(self.ids)]
            )
        self.x = x
        self.p = x.shape[1]
        self.xtx = x.T @ x
        self.xsum = x.sum(axis=0)
        self.hyper_keys = ["mu_sigma", "ltau0"]
        if self.q == 2:
            self.hyper_keys.append("ltau1")
        self.hyper_keys.append("ltau_sigma")
        if self.q == 2:
            self.hyper_keys.append("zrho01")
            if spec.correlated_with_sd:
                self.hyper_keys += ["zrho0s", "zrho1s"]
        elif spec.correlated_with_sd:
            self.hyper_keys.append("zrho")

    # -- law assembly -------------------------------------------------------

    def sigma_matrix(self, state) -> np.ndarray:
        t0 = np.exp(state["ltau0"])
        ts = np.exp(state["ltau_sigma"])
        if self.q == 1:
            rho = np.tanh(state["zrho"]) if "zrho" in state else 0.0
            return np.array([[t0 * t0, rho * t0 * ts], [rho * t0 * ts, ts * ts]])
        t1 = np.exp(state["ltau1"])
        r01 = np.tanh(state["zrho01"])
        r0s = np.tanh(state["zrho0s"]) if "zrho0s" in state else 0.0
        r1s = np.tanh(state["zrho1s"]) if "zrho1s" in state else 0.0
        return np.array(
            [
                [t0 * t0, r01 * t0 * t1, r0s * t0 * ts],
                [r01 * t0 * t1, t1 * t1, r1s * t1 * ts],
                [r0s * t0 * ts, r1s * t1 * ts, ts * ts],
            ]
        )

    def law_from_state(self, state) -> RandomEffectsLaw:
        kw = dict(
            structure=self.spec.structure,
            correlated_with_sd=self.spec.correlated_with_sd,
            mu_sigma=float(state["mu_sigma"]),
            tau0=float(np.exp(state["ltau0"])),
            tau_sigma=float(np.exp(state["ltau_sigma"])),
        )
        if self.q == 2:
            kw["tau1"] = float(np.exp(state["ltau1"]))
            kw["rho01"] = float(np.tanh(state["zrho01"]))
            if self.spec.correlated_with_sd:
                kw["rho0sigma"] = float(np.tanh(state["zrho0s"]))
                kw["rho1sigma"] = float(np.tanh(state["zrho1s"]))
        elif self.spec.correlated_with_sd:
            kw["rho"] = float(np.tanh(state["zrho"]))
        return RandomEffectsLaw(**kw)

    # -- conditional pieces --------------------------------------------------

    def location_means(self, state):
        """Prior means of (c0[, c1]): fixed-effects contribution only."""
        m0 = self.x @ state["beta"]
        if self.q == 1:
            return m0, None
        return m0, state["beta_t"]

    def sse(self, state) -> np.ndarray:
        c0 = state["c0"]
        sse = self.syy - 2.0 * c0 * self.sy + self.n * c0 * c0
        if self.q == 2:
            c1 = state["c1"]
            sse = (
                sse
                - 2.0 * c1 * self.sty
                + 2.0 * c0 * c1 * self.st
                + c1 * c1 * self.stt
            )
        return np.maximum(sse, 0.0)

    def draw_locations(self, state, rng):
        """Conjugate Gaussian draw of (c0[, c1]) given everything else.

        Only valid when the likelihood for the locations is the longitudinal
        one (no hazard term), i.e. in the mixed-model sampler.
        """
        sig = self.sigma_matrix(state)
        inv_var = np.exp(-2.0 * state["lsig"])
        m0, m1 = self.location_means(state)
        v = state["lsig"] - state["mu_sigma"]
        if self.q == 1:
            s = sig[0, 1]
            cv = max(sig[0, 0] - s * s / sig[1, 1], 1e-12)
            pm = m0 + (s / sig[1, 1]) * v
            prec = self.n * inv_var + 1.0 / cv
            var = 1.0 / prec
            mean = var * (self.sy * inv_var + pm / cv)
            state["c0"] = mean + np.sqrt(var) * rng.standard_normal(self.m)
            return
        suu = sig[:2, :2]
        s = sig[:2, 2]
        cuu = suu - np.outer(s, s) / sig[2, 2]
        p0 = np.linalg.inv(cuu)
        pm0 = m0 + (s[0] / sig[2, 2]) * v
        pm1 = m1 + (s[1] / sig[2, 2]) * v
        a = self.n * inv_var + p0[0, 0]
        b = self.st * inv_var + p0[0, 1]
        c = self.stt * inv_var + p0[1, 1]
        det = a * c - b * b
        rhs0 = self.sy * inv_var + p0[0, 0] * pm0 + p0[0, 1] * pm1
        rhs1 = self.sty * inv_var + p0[0, 1] * pm0 + p0[1, 1] * pm1
        mean0 = (c * rhs0 - b * rhs1) / det
        mean1 = (a * rhs1 - b * rhs0) / det
        v00 = c / det
        v01 = -b / det
        v11 = a / det
        l11 = np.sqrt(v00)
        l21 = v01 / l11
        l22 = np.sqrt(np.maximum(v11 - l21 * l21, 1e-14))
        z1 = rng.standard_normal(self.m)
        z2 = rng.standard_normal(self.m)
        state["c0"] = mean0 + l11 * z1
        state["c1"] = mean1 + l21 * z1 + l22 * z2

    def lsig_conditional(self, state):
        """Mean and variance of log sigma_i given the location effects."""
        sig = self.sigma_matrix(state)
        m0, m1 = self.location_means(state)
        if self.q == 1:
            s = sig[0, 1]
            coef = s / sig[0, 0]
            mean = state["mu_sigma"] + coef * (state["c0"] - m0)
            var = max(sig[1, 1] - s * coef, 1e-12)
            return mean, var
        suu = sig[:2, :2]
        s = sig[:2, 2]
        det = suu[0, 0] * suu[1, 1] - suu[0, 1] ** 2
        inv = np.array([[suu[1, 1], -suu[0, 1]], [-suu[0, 1], suu[0, 0]]]) / det
        coef = inv @ s
        u0 = state["c0"] - m0
        u1 = state["c1"] - m1
        mean = state["mu_sigma"] + coef[0] * u0 + coef[1] * u1
        var = max(sig[2, 2] - float(s @ coef), 1e-12)
        return mean, var

    def lsig_logp(self, state) -> np.ndarray:
        """Per-individual full conditional of log sigma, up to constants."""
        lsig = state["lsig"]
        sse = self.sse(state)
        mean, var = self.lsig_conditional(state)
        return (
            -self.n * lsig
            - 0.5 * sse * np.exp(-2.0 * lsig)
            - 0.5 * (lsig - mean) ** 2 / var
        )

    def draw_fixed_effects(self, state, rng):
        """Conjugate draw of (beta[, beta_t]) given effects and hyperparameters."""
        sig = self.sigma_matrix(state)
        omega = np.linalg.inv(sig)
        d = self.d
        z = np.empty((self.m, d))
        z[:, 0] = state["c0"]
        if self.q == 2:
            z[:, 1] = state["c1"]
        z[:, -1] = state["lsig"] - state["mu_sigma"]
        pdim = self.p + (self.q - 1)
        a = np.zeros((pdim, pdim))
        rhs = np.zeros(pdim)
        a[: self.p, : self.p] = omega[0, 0] * self.xtx
        rhs[: self.p] = self.x.T @ (z @ omega[0])
        if self.q == 2:
            a[: self.p, self.p] = omega[0, 1] * self.xsum
            a[self.p, : self.p] = omega[0, 1] * self.xsum
            a[self.p, self.p] = omega[1, 1] * self.m
            rhs[self.p] = float(np.sum(z @ omega[1]))
        a[np.diag_indices(pdim)] += 1.0 / self.priors.location_sd**2
        chol = np.linalg.cholesky(a)
        mean = np.linalg.solve(a, rhs)
        draw = mean + np.linalg.solve(chol.T, rng.standard_normal(pdim))
        state["beta"] = draw[: self.p]
        if self.q == 2:
            state["beta_t"] = float(draw[self.p])

    # -- hyperparameter random-walk targets ----------------------------------

    def hyper_stats(self, state):
        """Raw cross-moments of (u = c - fixed-effect mean, w = log sigma)."""
        m0, m1 = self.location_means(state)
        u0 = state["c0"] - m0
        w = state["lsig"]
        if self.q == 1:
            u = u0[:, None]
        else:
            u = np.column_stack([u0, state["c1"] - m1])
        return {
            "su": u.sum(axis=0),
            "suu": u.T @ u,
            "sw": float(w.sum()),
            "sww": float(w @ w),
            "suw": u.T @ w,
        }

    def hyper_logp(self, state, stats) -> float:
        """MVN log-likelihood of the effects plus transformed-coordinate priors."""
        sig = self.sigma_matrix(state)
        mu = state["mu_sigma"]
        d = self.d
        s = np.empty((d, d))
        s[: d - 1, : d - 1] = stats["suu"]
        cross = stats["suw"] - mu * stats["su"]
        s[: d - 1, d - 1] = cross
        s[d - 1, : d - 1] = cross
        s[d - 1, d - 1] = stats["sww"] - 2.0 * mu * stats["sw"] + self.m * mu * mu
        try:
            chol = np.linalg.cholesky(sig)
        except np.linalg.LinAlgError:
            return -np.inf
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv = np.linalg.inv(sig)
        ll = -0.5 * (self.m * (d * LOG_2PI + logdet) + float(np.sum(inv * s)))
        # priors on the sampling coordinates
        ll += -0.5 * mu * mu / self.priors.location_sd**2
        log_upper = np.log(self.priors.sd_upper)
        for key in self.hyper_keys:
            val = state[key]
            if key.startswith("ltau"):
                if val > log_upper:
                    return -np.inf
                ll += val  # Jacobian of tau = exp(ltau) against the flat prior
            elif key.startswith("zrho"):
                rho = np.tanh(val)
                ll += np.log1p(-rho * rho)  # Jacobian of rho = tanh(z)
        return float(ll)

    # -- initialization -------------------------------------------------------

    def naive_state(self, chain, rng):
        """Moment-based starting values, jittered per chain."""
        n = self.n
        has = n > 0
        mean = np.where(has, self.sy / np.maximum(n, 1.0), np.nan)
        if self.q == 2:
            denom = n * self.stt - self.st**2
            ok = (n >= 2) & (denom > 1e-8)
            slope = np.where(ok, (n * self.sty - self.st * self.sy) / np.where(ok, denom, 1.0), 0.0)
            level = np.where(has, mean - slope * self.st / np.maximum(n, 1.0), np.nan)
        else:
            slope = None
            level = mean
        var = np.where(
            n >= 2, self.syy / np.maximum(n, 1.0) - mean**2, np.nan
        )
        sd = np.sqrt(np.clip(var, 0.0, None))
        positive = sd[np.isfinite(sd) & (sd > 0)]
        floor = float(np.median(positive)) * 0.05 if len(positive) else 1.0
        lsig = np.log(np.clip(sd, floor, None))
        fill = float(np.nanmedian(lsig)) if np.any(np.isfinite(lsig)) else 0.0
        lsig = np.where(np.isfinite(lsig), lsig, fill)
        level_fill = float(np.nanmedian(level)) if np.any(np.isfinite(level)) else 0.0
        level = np.where(np.isfinite(level), level, level_fill)

        beta, *_ = np.linalg.lstsq(self.x, level, rcond=None)
        resid = level - self.x @ beta
        tau0 = float(np.clip(np.std(resid), 1e-2, self.priors.sd_upper * 0.9))
        tau_sigma = float(np.clip(np.std(lsig), 5e-2, self.priors.sd_upper * 0.9))
        state = {
            "c0": level.copy(),
            "lsig": lsig.copy(),
            "beta": beta,
            "mu_sigma": float(np.mean(lsig)),
            "ltau0": float(np.log(tau0)),
            "ltau_sigma": float(np.log(tau_sigma)),
        }
        if self.q == 2:
            state["c1"] = slope.copy()
            state["beta_t"] = float(np.mean(slope))
            tau1 = float(np.clip(np.std(slope), 1e-3, self.priors.sd_upper * 0.9))
            state["ltau1"] = float(np.log(tau1))
            state["zrho01"] = float(np.arctanh(np.clip(_corr(resid, slope), -0.9, 0.9)))
            if self.spec.correlated_with_sd:
                state["zrho0s"] = float(np.arctanh(np.clip(_corr(resid, lsig), -0.9, 0.9)))
                state["zrho1s"] = float(np.arctanh(np.clip(_corr(slope, lsig), -0.9, 0.9)))
        elif self.spec.correlated_with_sd:
            state["zrho"] = float(np.arctanh(np.clip(_corr(resid, lsig), -0.9, 0.9)))
        # mild per-chain jitter so convergence diagnostics see distinct starts
        for key in self.hyper_keys:
            state[key] = float(state[key] + 0.05 * rng.standard_normal())
        state["beta"] = state["beta"] + 0.02 * tau0 * rng.standard_normal(self.p)
        return state

    def base_scales(self, state):
        tau_sigma = float(np.exp(state["ltau_sigma"]))
        return {
            "lsig": 1.0 / np.sqrt(2.0 * self.n + 1.0 / tau_sigma**2),
            "mu_sigma": tau_sigma / np.sqrt(self.m),
            "ltau": 1.0 / np.sqrt(2.0 * self.m),
            "zrho": 1.0 / np.sqrt(self.m),
        }

    # -- monitored parameters --------------------------------------------------

    def parameter_names(self):
        names = [f"beta[{nm}]" for nm in ("const",) + self.covariate_names]
        if self.q == 2:
            names.append("beta_t")
        names += ["mu_sigma", "tau0"]
        if self.q == 2:
            names.append("tau1")
        names.append("tau_sigma")
        if self.q == 2:
            names.append("rho01")
            if self.spec.correlated_with_sd:
                names += ["rho0sigma", "rho1sigma"]
        elif self.spec.correlated_with_sd:
            names.append("rho")
        return tuple(names)

    def extract(self, state) -> np.ndarray:
        out = list(np.asarray(state["beta"], dtype=float))
        if self.q == 2:
            out.append(state["beta_t"])
        out += [state["mu_sigma"], np.exp(state["ltau0"])]
        if self.q == 2:
            out.append(np.exp(state["ltau1"]))
        out.append(np.exp(state["ltau_sigma"]))
        if self.q == 2:
            out.append(np.tanh(state["zrho01"]))
            if self.spec.correlated_with_sd:
                out += [np.tanh(state["zrho0s"]), np.tanh(state["zrho1s"])]
        elif self.spec.correlated_with_sd:
            out.append(np.tanh(state["zrho"]))
        return np.array(out, dtype=float)


def _corr(a, b) -> float:
    sa, sb = np.std(a), np.std(b)
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


class _LmmModel:
    """Block-structured sampler for the mixed location-scale model."""

    def __init__(self, kernel: MlsKernel):
        self.k = kernel
        self.parameter_names = kernel.parameter_names()
        self._acc_level = np.zeros(kernel.m)
        self._acc_sd = np.zeros(kernel.m)
        self._acc_slope = np.zeros(kernel.m) if kernel.q == 2 else None
        self._acc_count = 0

    def init_state(self, chain, rng):
        return self.k.naive_state(chain, rng)

    def log_posterior(self, state):
        k = self.k
        lsig = state["lsig"]
        data_ll = float(np.sum(-k.n * lsig - 0.5 * k.sse(state) * np.exp(-2.0 * lsig)))
        return data_ll + self.k.hyper_logp(state, k.hyper_stats(state))

    def make_blocks(self):
        k = self.k
        scales = k.base_scales_init
        blocks = [
            GibbsBlock("locations", k.draw_locations),
            RWBlock(
                "log_sigma",
                get=lambda s: s["lsig"],
                set=self._set_lsig,
                logp=lambda s, aux: k.lsig_logp(s),
                n_replicas=k.m,
                proposal_scale=2.4,
                base_scales=scales["lsig"][:, None],
            ),
            GibbsBlock("fixed_effects", k.draw_fixed_effects),
        ]
        blocks.append(self._hyper_block("mu_sigma", scales["mu_sigma"], first=True))
        for key in k.hyper_keys[1:]:
            base = scales["ltau"] if key.startswith("ltau") else scales["zrho"]
            blocks.append(self._hyper_block(key, base, first=False))
        return blocks

    @staticmethod
    def _set_lsig(state, value):
        state["lsig"] = np.asarray(value, dtype=float).reshape(-1)

    def _hyper_block(self, key, base, first):
        k = self.k

        def pre(state):
            if first:
                state["_hstats"] = k.hyper_stats(state)
            return state["_hstats"]

        def get(state):
            return np.array([state[key]])

        def setter(state, value):
            state[key] = float(np.asarray(value).reshape(()))

        return RWBlock(
            name=key,
            get=get,
            set=setter,
            logp=lambda s, aux: np.array([k.hyper_logp(s, aux)]),
            n_replicas=1,
            proposal_scale=2.4,
            base_scales=np.array([[base]]),
            precompute=pre,
        )

    def extract(self, state):
        return self.k.extract(state)

    def on_kept(self, state):
        self._acc_level += state["c0"]
        self._acc_sd += np.exp(state["lsig"])
        if self._acc_slope is not None:
            self._acc_slope += state["c1"]
        self._acc_count += 1

    def stage1(self) -> Stage1Estimates:
        c = max(self._acc_count, 1)
        return Stage1Estimates(
            individual_id=self.k.ids,
            level=self._acc_level / c,
            sd=self._acc_sd / c,
            slope=None if self._acc_slope is None else self._acc_slope / c,
        )


@dataclass
class LmmFit:
    """Mixed-model fit: population draws plus per-individual posterior means."""

    samples: "PosteriorSamples"
    stage1: Stage1Estimates
    acceptance: dict
    rhat: dict
    warnings: list


def default_lmm_settings(seed: int = 0, n_chains: int = 3) -> McmcSettings:
    return McmcSettings(
        n_chains=n_chains, burn_in=1000, n_samples=1000, thinning=1, seed=seed
    )


def fit_lmm(
    data: LongitudinalDataset,
    spec: LmmSpec,
    priors: PriorSpec | None = None,
    settings: McmcSettings | None = None,
    covariates: CovariateTable | None = None,
) -> LmmFit:
    """Fit a mixed location-scale model by MCMC.

    Returns population-parameter draws together with per-individual posterior
    means: level (fixed intercept + random intercept, on the outcome scale),
    sd (posterior mean residual SD) and slope when the model has one. A
    monitored R-hat above 1.1 produces a prominent warning, never a silent
    result.
    """
    priors = priors or PriorSpec()
    settings = settings or default_lmm_settings()
    kernel = MlsKernel(data, spec, priors, covariates=covariates)
    kernel.base_scales_init = kernel.base_scales(kernel.naive_state(0, _null_rng()))
    model = _LmmModel(kernel)
    result = run_chains(model, settings)
    rhat, warn = convergence_check(result, settings)
    return LmmFit(
        samples=result.samples,
        stage1=model.stage1(),
        acceptance=result.acceptance,
        rhat=rhat,
        warnings=result.warnings + warn,
    )


def _null_rng() -> np.random.Generator:
    # deterministic throwaway stream for scale initialisation
    return np.random.Generator(np.random.Philox(key=np.array([0, 0], dtype=np.uint64)))


def convergence_check(result: McmcResult, settings: McmcSettings, threshold=1.1):
    """Per-parameter R-hat where computable; warn prominently above threshold."""
    rhat = {}
    warn = []
    samples = result.samples
    if settings.n_chains >= 2 and settings.n_samples >= 50:
        for name in samples.parameter_names:
            try:
                rhat[name] = gelman_rubin(samples, name)
            except Exception:
                continue
        bad = {k: v for k, v in rhat.items() if v > threshold}
        if bad:
            msg = "non-convergence warning: R-hat above 1.1 for " + ", ".join(
                f"{k}={v:.3f}" for k, v in bad.items()
            )
            warn.append(msg)
            _warnings.warn(msg, stacklevel=2)
    return rhat, warn
