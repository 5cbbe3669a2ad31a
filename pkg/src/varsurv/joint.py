"""Joint models: the mixed location-scale sub-model and a piecewise-constant
hazard sub-model fitted simultaneously through shared random effects."""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CovariateTable,
    EffectStructure,
    IndividualEffects,
    LongitudinalDataset,
    PosteriorSamples,
    SurvivalDataset,
)
from .lmm import (
    LOG_2PI,
    LmmError,
    LmmParams,
    LmmSpec,
    MlsKernel,
    PriorSpec,
    Stage1Estimates,
    convergence_check,
    lmm_log_posterior_parts,
)
from .mcmc import (
    GibbsBlock,
    McmcSettings,
    RWBlock,
    autocorrelation,
    run_chains,
)
from .survival import (
    PiecewiseHazard,
    exposure_matrix,
    interval_index,
    quantile_cutpoints,
)


class JointError(RuntimeError):
    pass


@dataclass(frozen=True)
class JointSpec:
    """Joint-model specification: longitudinal spec plus hazard intervals.

    The shared effects entering the hazard are fixed by the longitudinal
    structure: the usual level and the residual SD always, the slope when the
    model has one.
    """

    lmm: LmmSpec = field(default_factory=LmmSpec)
    K: int = 15

    def __post_init__(self):
        if self.K < 1:
            raise JointError("K must be >= 1")

    @property
    def association(self) -> tuple:
        if self.lmm.structure is EffectStructure.INTERCEPT_SLOPE:
            return ("level", "sd", "slope")
        return ("level", "sd")

    @classmethod
    def from_name(cls, name: str, K: int = 15, fixed_covariates=()) -> "JointSpec":
        table = {"jm1": "lmm1", "jm2": "lmm2", "jm3": "lmm3", "jm4": "lmm4"}
        if name not in table:
            raise JointError(f"unknown joint-model name {name!r}")
        return cls(lmm=LmmSpec.from_name(table[name], fixed_covariates), K=K)

    def model_name(self) -> str:
        return self.lmm.model_name().replace("lmm", "jm")


@dataclass(frozen=True)
class JointParams:
    """Population parameters of the joint model for log-posterior evaluation."""

    lmm: LmmParams
    alpha: np.ndarray
    gamma: np.ndarray
    hazard: PiecewiseHazard


def joint_log_posterior_parts(
    params: JointParams,
    effects: IndividualEffects,
    long: LongitudinalDataset,
    surv: SurvivalDataset,
    spec: JointSpec,
    priors: PriorSpec,
    covariates: CovariateTable | None = None,
    hazard_covariates: tuple = (),
):
    """(data, effects, survival, prior) log-density parts.

    The hazard's linear predictor uses the zero-mean effects convention:
    lp_i = alpha_level*b0_i + alpha_sd*sigma_i (+ alpha_slope*b1_i)
    + gamma^T W_i.
    """
    try:
        data_part, effects_part, lmm_prior = lmm_log_posterior_parts(
            params.lmm, effects, long, spec.lmm, priors, covariates
        )
    except LmmError as exc:
        raise JointError(f"longitudinal component: {exc}") from exc

    alpha = np.asarray(params.alpha, dtype=float)
    gamma = np.asarray(params.gamma, dtype=float)
    assoc = spec.association
    if len(alpha) != len(assoc):
        raise JointError(f"alpha must have {len(assoc)} entries for {assoc}")
    pos = {int(i): k for k, i in enumerate(effects.individual_id)}
    try:
        rows = np.array([pos[int(i)] for i in surv.individual_id], dtype=int)
    except KeyError as exc:
        raise JointError(f"survival component: no effects for individual {exc.args[0]}")
    shared = {"level": effects.b0, "sd": effects.sigma, "slope": effects.b1}
    lp = np.zeros(len(surv))
    for a, name in zip(alpha, assoc):
        lp = lp + a * shared[name][rows]
    if hazard_covariates:
        if covariates is None:
            raise JointError("hazard covariates requested but none supplied")
        w = covariates.subset(hazard_covariates).aligned_to(surv.individual_id)
        lp = lp + w @ gamma
    elif len(gamma):
        raise JointError("gamma supplied without hazard covariates")

    ph = params.hazard
    base = exposure_matrix(ph, surv.followup_time) @ ph.heights
    log_h = np.log(ph.heights[interval_index(ph, surv.followup_time)])
    surv_ll = surv.event * (log_h + lp) - np.exp(lp) * base
    if not np.all(np.isfinite(surv_ll)):
        bad = int(surv.individual_id[~np.isfinite(surv_ll)][0])
        raise JointError(f"survival component: non-finite log-density for individual {bad}")
    survival_part = float(surv_ll.sum())

    prior_part = lmm_prior
    prior_part += -0.5 * float(np.sum(alpha**2)) / priors.location_sd**2
    prior_part += -0.5 * float(np.sum(gamma**2)) / priors.location_sd**2
    prior_part += -0.5 * float(np.sum(np.log(ph.heights) ** 2)) / priors.location_sd**2
    if not np.isfinite(prior_part):
        raise JointError("prior component: non-finite log-density")
    return data_part, effects_part, survival_part, prior_part


def joint_log_posterior(
    params, effects, long, surv, spec, priors, covariates=None, hazard_covariates=()
) -> float:
    return float(
        sum(
            joint_log_posterior_parts(
                params, effects, long, surv, spec, priors, covariates, hazard_covariates
            )
        )
    )


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------


class _JointModel:
    """Block-structured sampler for the joint model.

    The hazard's linear predictor is centered at fixed data-derived offsets
    (absorbed into the baseline heights), which removes the otherwise crushing
    posterior correlation between the association block and the heights.
    """

    def __init__(
        self,
        kernel: MlsKernel,
        surv: SurvivalDataset,
        spec: JointSpec,
        hazard_matrix,
        hazard_names,
        cutpoints,
        freeze_survival=False,
        fixed_heights=None,
    ):
        self.k = kernel
        self.spec = spec
        self.freeze = freeze_survival
        pos = {int(i): j for j, i in enumerate(surv.individual_id)}
        rows = np.array([pos[int(i)] for i in kernel.ids], dtype=int)
        self.followup = surv.followup_time[rows]
        self.delta = surv.event[rows].astype(float)
        self.cutpoints = np.asarray(cutpoints, dtype=float)
        ph = PiecewiseHazard(self.cutpoints, np.ones(len(self.cutpoints) - 1))
        self.expo = exposure_matrix(ph, self.followup)
        self.ev_interval = interval_index(ph, self.followup)
        self.K = ph.n_intervals
        self.d_k = np.bincount(
            self.ev_interval[self.delta > 0], minlength=self.K
        ).astype(float)
        self.assoc = () if freeze_survival else spec.association
        self.w = None
        self.hazard_names = tuple(hazard_names) if not freeze_survival else ()
        if self.hazard_names:
            w = np.asarray(hazard_matrix, dtype=float)
            self.w_mean = w.mean(axis=0)
            self.w = w - self.w_mean
        self.fixed_heights = fixed_heights
        # offsets fixed from moment-based starting values
        init = kernel.naive_state(0, _det_rng())
        self.off_level = float(np.mean(init["c0"]))
        self.off_sd = float(np.mean(np.exp(init["lsig"])))
        self.off_slope = float(np.mean(init["c1"])) if kernel.q == 2 else 0.0
        self._init_heights = self._nelson_aalen_heights()
        self.parameter_names = self._names()
        m = kernel.m
        self._acc_level = np.zeros(m)
        self._acc_sd = np.zeros(m)
        self._acc_slope = np.zeros(m) if kernel.q == 2 else None
        self._acc_count = 0
        self._deviances = []

    def _nelson_aalen_heights(self):
        exposure = self.expo.sum(axis=0)
        return (self.d_k + 0.5) / np.maximum(exposure, 1e-8)

    def _names(self):
        names = list(self.k.parameter_names())
        names += [f"alpha_{a}" for a in self.assoc]
        names += [f"gamma[{w}]" for w in self.hazard_names]
        if not self.freeze:
            names += [f"h0[{k}]" for k in range(1, self.K + 1)]
        return tuple(names)

    # -- state management ------------------------------------------------------

    def init_state(self, chain, rng):
        state = self.k.naive_state(chain, rng)
        state["alpha"] = np.zeros(len(self.assoc))
        state["gamma"] = np.zeros(len(self.hazard_names))
        if self.fixed_heights is not None:
            state["lh"] = np.log(np.asarray(self.fixed_heights, dtype=float))
        else:
            state["lh"] = np.log(self._init_heights) + (
                0.0 if self.freeze else 0.05 * rng.standard_normal(self.K)
            )
        self._refresh_lp(state)
        return state

    def _refresh_lp(self, state):
        state["sigma"] = np.exp(state["lsig"])
        lp = np.zeros(self.k.m)
        for a, name in zip(state["alpha"], self.assoc):
            if name == "level":
                lp = lp + a * (state["c0"] - self.off_level)
            elif name == "sd":
                lp = lp + a * (state["sigma"] - self.off_sd)
            else:
                lp = lp + a * (state["c1"] - self.off_slope)
        if self.w is not None and len(state["gamma"]):
            lp = lp + self.w @ state["gamma"]
        state["lp"] = lp

    def log_posterior(self, state):
        k = self.k
        lsig = state["lsig"]
        ll = float(np.sum(-k.n * lsig - 0.5 * k.sse(state) * np.exp(-2.0 * lsig)))
        ll += self.k.hyper_logp(state, k.hyper_stats(state))
        ll += self._survival_ll(state, self.expo @ np.exp(state["lh"]))
        return ll

    def _survival_ll(self, state, h0) -> float:
        lp = state["lp"]
        lh = state["lh"]
        return float(
            np.sum(self.delta * (lh[self.ev_interval] + lp)) - np.exp(lp) @ h0
        )

    # -- blocks -----------------------------------------------------------------

    def make_blocks(self):
        k = self.k
        scales = k.base_scales_init
        blocks = [self._effects_block(scales)]
        blocks.append(GibbsBlock("fixed_effects", k.draw_fixed_effects))
        blocks.append(self._hyper_block("mu_sigma", scales["mu_sigma"], first=True))
        for key in k.hyper_keys[1:]:
            base = scales["ltau"] if key.startswith("ltau") else scales["zrho"]
            blocks.append(self._hyper_block(key, base, first=False))
        for j, name in enumerate(self.assoc):
            blocks.append(self._loghr_block(f"alpha_{name}", "alpha", j))
        for j, name in enumerate(self.hazard_names):
            blocks.append(self._loghr_block(f"gamma[{name}]", "gamma", j))
        if not self.freeze and self.fixed_heights is None:
            blocks.append(self._heights_block())
        return blocks

    def _effects_block(self, scales):
        k = self.k
        d = k.d

        def get(state):
            cols = [state["c0"]]
            if k.q == 2:
                cols.append(state["c1"])
            cols.append(state["lsig"])
            return np.column_stack(cols)

        def setter(state, value):
            value = np.asarray(value, dtype=float).reshape(k.m, d)
            state["c0"] = value[:, 0].copy()
            if k.q == 2:
                state["c1"] = value[:, 1].copy()
            state["lsig"] = value[:, -1].copy()
            self._refresh_lp(state)

        def pre(state):
            sig = k.sigma_matrix(state)
            return {
                "h0": self.expo @ np.exp(state["lh"]),
                "omega": np.linalg.inv(sig),
                "m": k.location_means(state),
            }

        def logp(state, aux):
            lsig = state["lsig"]
            ll = -k.n * lsig - 0.5 * k.sse(state) * np.exp(-2.0 * lsig)
            m0, m1 = aux["m"]
            u0 = state["c0"] - m0
            v = lsig - state["mu_sigma"]
            om = aux["omega"]
            if k.q == 1:
                quad = om[0, 0] * u0 * u0 + 2.0 * om[0, 1] * u0 * v + om[1, 1] * v * v
            else:
                u1 = state["c1"] - m1
                quad = (
                    om[0, 0] * u0 * u0
                    + om[1, 1] * u1 * u1
                    + om[2, 2] * v * v
                    + 2.0 * (om[0, 1] * u0 * u1 + om[0, 2] * u0 * v + om[1, 2] * u1 * v)
                )
            ll = ll - 0.5 * quad
            lp = state["lp"]
            ll = ll + self.delta * lp - np.exp(lp) * aux["h0"]
            return ll

        base = np.column_stack(
            [scales["c0"]] + ([scales["c1"]] if k.q == 2 else []) + [scales["lsig"]]
        )
        return RWBlock(
            name="effects",
            get=get,
            set=setter,
            logp=logp,
            dimension=d,
            n_replicas=k.m,
            proposal_scale=2.4 / np.sqrt(d),
            base_scales=base,
            precompute=pre,
        )

    def _hyper_block(self, key, base, first):
        k = self.k

        def pre(state):
            if first:
                state["_hstats"] = k.hyper_stats(state)
            return state["_hstats"]

        return RWBlock(
            name=key,
            get=lambda s: np.array([s[key]]),
            set=lambda s, v: s.__setitem__(key, float(np.asarray(v).reshape(()))),
            logp=lambda s, aux: np.array([k.hyper_logp(s, aux)]),
            proposal_scale=2.4,
            base_scales=np.array([[base]]),
            precompute=pre,
        )

    def _loghr_block(self, name, field_name, j):
        def get(state):
            return np.array([state[field_name][j]])

        def setter(state, value):
            state[field_name] = state[field_name].copy()
            state[field_name][j] = float(np.asarray(value).reshape(()))
            self._refresh_lp(state)

        def pre(state):
            return self.expo @ np.exp(state["lh"])

        def logp(state, aux):
            ll = self._survival_ll(state, aux)
            ll += -0.5 * state[field_name][j] ** 2 / self.k.priors.location_sd**2
            return np.array([ll])

        return RWBlock(
            name=name,
            get=get,
            set=setter,
            logp=logp,
            proposal_scale=1.0,
            base_scales=np.array([[self._loghr_scale(field_name, j)]]),
            precompute=pre,
        )

    def _loghr_scale(self, field_name, j) -> float:
        events = max(float(self.delta.sum()), 1.0)
        if field_name == "gamma":
            spread = float(np.std(self.w[:, j]))
        else:
            name = self.assoc[j]
            init = self._init_spreads
            spread = init[name]
        return 1.0 / (max(spread, 1e-8) * np.sqrt(events))

    def _heights_block(self):
        def get(state):
            return state["lh"][:, None]

        def setter(state, value):
            state["lh"] = np.asarray(value, dtype=float).reshape(-1)

        def pre(state):
            return self.expo.T @ np.exp(state["lp"])

        def logp(state, aux):
            lh = state["lh"]
            return (
                self.d_k * lh
                - np.exp(lh) * aux
                - 0.5 * lh**2 / self.k.priors.location_sd**2
            )

        return RWBlock(
            name="log_heights",
            get=get,
            set=setter,
            logp=logp,
            n_replicas=self.K,
            proposal_scale=2.4,
            base_scales=(1.0 / np.sqrt(self.d_k + 1.0))[:, None],
            precompute=pre,
        )

    # -- monitoring --------------------------------------------------------------

    def extract(self, state):
        out = list(self.k.extract(state))
        out += list(state["alpha"])
        out += list(state["gamma"])
        if not self.freeze:
            out += list(np.exp(state["lh"]))
        return np.array(out, dtype=float)

    def on_kept(self, state):
        self._acc_level += state["c0"]
        self._acc_sd += state["sigma"]
        if self._acc_slope is not None:
            self._acc_slope += state["c1"]
        self._acc_count += 1
        k = self.k
        lsig = state["lsig"]
        long_ll = float(
            np.sum(
                -0.5 * k.n * LOG_2PI
                - k.n * lsig
                - 0.5 * k.sse(state) * np.exp(-2.0 * lsig)
            )
        )
        surv_ll = self._survival_ll(state, self.expo @ np.exp(state["lh"]))
        self._deviances.append(-2.0 * (long_ll + surv_ll))


def _det_rng():
    return np.random.Generator(np.random.Philox(key=np.array([0, 0], dtype=np.uint64)))


@dataclass
class JointFit:
    """Joint-model fit: posterior draws, deviance information, diagnostics."""

    samples: PosteriorSamples
    cutpoints: np.ndarray
    offsets: dict
    dic: float
    p_dic: float
    acceptance: dict
    rhat: dict
    warnings: list
    effect_means: Stage1Estimates | None = None

    def alpha_summary(self, name: str):
        col = self.samples.column(f"alpha_{name}")
        lo, hi = np.percentile(col, [2.5, 97.5])
        return float(col.mean()), float(col.std(ddof=1)), float(lo), float(hi)


def default_joint_settings(seed: int = 0, n_chains: int = 3) -> McmcSettings:
    return McmcSettings(
        n_chains=n_chains, burn_in=2000, n_samples=1000, thinning=4, seed=seed
    )


def fit_joint(
    long: LongitudinalDataset,
    surv: SurvivalDataset,
    covariates: CovariateTable | None,
    spec: JointSpec,
    priors: PriorSpec | None = None,
    settings: McmcSettings | None = None,
    hazard_covariates: tuple | None = None,
    freeze_survival: bool = False,
    fixed_heights=None,
) -> JointFit:
    """Fit the joint model by MCMC with an analytic piecewise cumulative hazard.

    Cut-points are frozen at the K-quantiles of the observed event times
    before sampling. alpha_sd draws are on the per-unit-of-SD scale, directly
    comparable to the two-stage variability log hazard ratio. freeze_survival
    turns off the association and hazard updates (the longitudinal sub-model
    then matches fit_lmm); fixed_heights pins the baseline heights.
    """
    priors = priors or PriorSpec()
    settings = settings or default_joint_settings()
    n_events = surv.n_events()
    if not freeze_survival and n_events < spec.K:
        raise JointError(
            f"{n_events} events but K={spec.K}; need at least K events for cut-points"
        )
    ids = np.unique(np.concatenate([long.ids(), surv.individual_id]))
    missing = set(int(i) for i in long.ids()) - set(int(i) for i in surv.individual_id)
    if missing:
        raise JointError(f"longitudinal individuals missing from survival data: {sorted(missing)[:5]}")
    kernel = MlsKernel(long, spec.lmm, priors, covariates=covariates, ids=ids)
    event_times = surv.followup_time[surv.event]
    cutpoints = quantile_cutpoints(
        event_times, spec.K, t_max=float(surv.followup_time.max())
    )
    if hazard_covariates is None:
        hazard_covariates = covariates.names if covariates is not None else ()
    w_matrix = None
    if hazard_covariates and not freeze_survival:
        if covariates is None:
            raise JointError("hazard covariates requested but none supplied")
        w_matrix = covariates.subset(hazard_covariates).aligned_to(kernel.ids)
    else:
        hazard_covariates = ()
    base_state = kernel.naive_state(0, _det_rng())
    kernel.base_scales_init = _joint_base_scales(kernel, base_state)
    model = _JointModel(
        kernel,
        surv,
        spec,
        w_matrix,
        hazard_covariates,
        cutpoints,
        freeze_survival=freeze_survival,
        fixed_heights=fixed_heights,
    )
    model._init_spreads = _init_spreads(kernel, base_state)
    result = run_chains(model, settings)
    rhat, warn = convergence_check(result, settings)
    warnings = result.warnings + warn
    for name in model.assoc:
        try:
            acf1 = autocorrelation(result.samples, f"alpha_{name}", 1)[1]
        except ValueError:
            continue
        if acf1 > 0.9:
            msg = (
                f"alpha_{name} lag-1 autocorrelation {acf1:.2f} > 0.9; "
                "consider a larger thinning interval"
            )
            warnings.append(msg)
            _warnings.warn(msg, stacklevel=2)
    dev = np.asarray(model._deviances)
    p_dic = float(dev.var(ddof=1) / 2.0) if len(dev) > 1 else 0.0
    dic = float(dev.mean() + p_dic) if len(dev) else float("nan")
    count = max(model._acc_count, 1)
    fit = JointFit(
        samples=result.samples,
        cutpoints=cutpoints,
        offsets={
            "level": model.off_level,
            "sd": model.off_sd,
            "slope": model.off_slope,
            "hazard_covariates": dict(
                zip(model.hazard_names, np.atleast_1d(getattr(model, "w_mean", np.array([]))))
            ),
        },
        dic=dic,
        p_dic=p_dic,
        acceptance=result.acceptance,
        rhat=rhat,
        warnings=warnings,
    )
    fit.effect_means = Stage1Estimates(
        individual_id=kernel.ids,
        level=model._acc_level / count,
        sd=model._acc_sd / count,
        slope=None if model._acc_slope is None else model._acc_slope / count,
    )
    return fit


def _joint_base_scales(kernel: MlsKernel, state):
    """Static proposal shapes from the moment initialisation."""
    scales = kernel.base_scales(state)
    sigma2 = np.exp(2.0 * state["lsig"])
    tau0 = float(np.exp(state["ltau0"]))
    scales["c0"] = 1.0 / np.sqrt(kernel.n / sigma2 + 1.0 / tau0**2)
    if kernel.q == 2:
        tau1 = float(np.exp(state["ltau1"]))
        scales["c1"] = 1.0 / np.sqrt(kernel.stt / sigma2 + 1.0 / tau1**2)
    return scales


def _init_spreads(kernel: MlsKernel, state):
    return {
        "level": float(np.std(state["c0"])) or 1.0,
        "sd": float(np.std(np.exp(state["lsig"]))) or 1.0,
        "slope": float(np.std(state.get("c1", np.zeros(1)))) or 1.0,
    }
