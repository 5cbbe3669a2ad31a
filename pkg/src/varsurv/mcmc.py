"""Adaptive Metropolis-within-Gibbs engine and convergence diagnostics.

A model exposes a block structure rather than a single update rule:

* ``parameter_names`` - labels of the monitored (stored) parameters;
* ``init_state(chain, rng) -> dict`` - fresh state for one chain;
* ``log_posterior(state) -> float`` - used once per chain as an
  initialization sanity check;
* ``make_blocks() -> list`` - fresh :class:`GibbsBlock` / :class:`RWBlock`
  objects per chain (random-walk proposal scales adapt per chain);
* ``extract(state) -> array`` - monitored parameter vector;
* ``on_kept(state)`` - optional hook, called once per stored draw (running
  accumulators for quantities too large to store).

Replicated random-walk blocks (``n_replicas > 1``) update many conditionally
independent coordinates at once: ``logp`` must return one value per replica
and replicas must be conditionally independent given the rest of the state,
so a single vectorized propose/accept sweep is valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import PosteriorSamples


class McmcError(RuntimeError):
    pass


@dataclass
class McmcSettings:
    """Chain-length and adaptation settings.

    ``adapt_window`` is the batch length for Robbins-Monro proposal-scale
    tuning during burn-in; 0 disables adaptation entirely. ``target_accept``
    overrides every block's own target when set.
    """

    n_chains: int = 3
    burn_in: int = 1000
    n_samples: int = 1000
    thinning: int = 1
    adapt_window: int = 50
    target_accept: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise McmcError("n_chains must be >= 1")
        if self.n_samples < 1:
            raise McmcError("n_samples must be >= 1 (zero-iteration request)")
        if self.thinning < 1:
            raise McmcError("thinning must be >= 1")
        if self.burn_in < 0 or self.adapt_window < 0:
            raise McmcError("burn_in and adapt_window must be >= 0")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise McmcError("target_accept must lie in (0, 1)")

    @property
    def total_iterations(self) -> int:
        return self.burn_in + self.n_samples * self.thinning


@dataclass
class GibbsBlock:
    """Conjugate update: ``draw(state, rng)`` replaces its coordinates exactly."""

    name: str
    draw: Callable
    kind: str = "conjugate_gibbs"


@dataclass
class RWBlock:
    """Random-walk Metropolis update of one coordinate block.

    ``get``/``set`` move a (n_replicas, dimension) array in and out of the
    state (lower-dimensional layouts are reshaped); ``logp(state, aux)``
    returns the per-replica full conditional up to constants that do not
    depend on this block's coordinates. ``precompute`` runs once per sweep
    for quantities that are constant while this block updates.
    """

    name: str
    get: Callable
    set: Callable
    logp: Callable
    dimension: int = 1
    n_replicas: int = 1
    proposal_scale: float | np.ndarray = 1.0
    base_scales: np.ndarray | None = None
    target_accept: float | None = None
    precompute: Callable | None = None
    kind: str = "random_walk_metropolis"

    # runtime buffers, initialised by the engine
    _log_scale: np.ndarray = field(default=None, repr=False)
    _window_accepts: np.ndarray = field(default=None, repr=False)
    _window_count: int = field(default=0, repr=False)
    _accepted: np.ndarray = field(default=None, repr=False)
    _proposed: int = field(default=0, repr=False)

    def _setup(self, target_override):
        if self.dimension < 1 or self.n_replicas < 1:
            raise McmcError(f"block {self.name}: bad dimensions")
        scale = np.broadcast_to(
            np.asarray(self.proposal_scale, dtype=float), (self.n_replicas,)
        ).copy()
        if np.any(scale <= 0):
            raise McmcError(f"block {self.name}: proposal_scale must be > 0")
        self._log_scale = np.log(scale)
        if self.base_scales is None:
            base = np.ones((self.n_replicas, self.dimension))
        else:
            base = np.broadcast_to(
                np.asarray(self.base_scales, dtype=float),
                (self.n_replicas, self.dimension),
            ).copy()
        if np.any(base <= 0):
            raise McmcError(f"block {self.name}: base_scales must be > 0")
        self._base = base
        if target_override is not None:
            self._target = target_override
        elif self.target_accept is not None:
            self._target = self.target_accept
        else:
            self._target = 0.44 if self.dimension == 1 else 0.23
        self._window_accepts = np.zeros(self.n_replicas)
        self._window_count = 0
        self._accepted = np.zeros(self.n_replicas)
        self._proposed = 0


def _rw_update(block: RWBlock, state: dict, rng: np.random.Generator, record: bool):
    aux = block.precompute(state) if block.precompute is not None else None
    shape = (block.n_replicas, block.dimension)
    cur = np.array(block.get(state), dtype=float).reshape(shape).copy()
    lp0 = np.asarray(block.logp(state, aux), dtype=float).reshape(block.n_replicas)
    if not np.all(np.isfinite(lp0)):
        raise McmcError(f"block {block.name}: current state has non-finite density")
    step = np.exp(block._log_scale)[:, None] * block._base * rng.standard_normal(shape)
    block.set(state, cur + step)
    lp1 = np.asarray(block.logp(state, aux), dtype=float).reshape(block.n_replicas)
    logr = np.where(np.isnan(lp1), -np.inf, lp1 - lp0)
    accept = np.log(rng.random(block.n_replicas)) < logr
    if not accept.all():
        mixed = np.where(accept[:, None], cur + step, cur)
        block.set(state, mixed)
    block._window_accepts += accept
    block._window_count += 1
    if record:
        block._accepted += accept
        block._proposed += 1


def _adapt(block: RWBlock, window_index: int):
    rate = block._window_accepts / max(block._window_count, 1)
    delta = min(0.5, 2.0 / np.sqrt(window_index))
    block._log_scale = np.clip(
        block._log_scale + delta * (rate - block._target), -12.0, 12.0
    )
    block._window_accepts[:] = 0.0
    block._window_count = 0


@dataclass
class McmcResult:
    samples: PosteriorSamples
    acceptance: dict
    warnings: list


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based per-chain stream; disjoint from datagen's per-individual keys."""
    key = np.array([seed % 2**64, 2**48 + chain], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def run_chains(model, settings: McmcSettings) -> McmcResult:
    """Run all chains of a block-structured sampler.

    Chains are independent (sequentially executed here); adaptation runs
    during burn-in only, so post-burn-in transition kernels are fixed and the
    stored draws target the correct stationary distribution. With a fixed
    seed the output is bit-reproducible.
    """
    names = tuple(model.parameter_names)
    rows = []
    chain_ids = []
    warnings: list[str] = []
    acc_accum: dict[str, list] = {}
    for chain in range(settings.n_chains):
        rng = chain_rng(settings.seed, chain)
        state = model.init_state(chain, rng)
        lp = float(model.log_posterior(state))
        if not np.isfinite(lp):
            raise McmcError(
                f"chain {chain}: log-posterior is {lp} at initialization; "
                "re-initialize with different starting values"
            )
        blocks = model.make_blocks()
        for block in blocks:
            if isinstance(block, RWBlock):
                block._setup(settings.target_accept)
        window = 0
        for t in range(1, settings.total_iterations + 1):
            burning = t <= settings.burn_in
            for block in blocks:
                if isinstance(block, GibbsBlock):
                    block.draw(state, rng)
                else:
                    _rw_update(block, state, rng, record=not burning)
            if (
                burning
                and settings.adapt_window > 0
                and t % settings.adapt_window == 0
            ):
                window += 1
                for block in blocks:
                    if isinstance(block, RWBlock):
                        _adapt(block, window)
            if not burning and (t - settings.burn_in) % settings.thinning == 0:
                rows.append(np.asarray(model.extract(state), dtype=float))
                chain_ids.append(chain)
                hook = getattr(model, "on_kept", None)
                if hook is not None:
                    hook(state)
        for block in blocks:
            if isinstance(block, RWBlock):
                rate = block._accepted / max(block._proposed, 1)
                acc_accum.setdefault(block.name, []).append(rate)
                if np.any(rate == 0.0):
                    dead = int(np.sum(rate == 0.0))
                    warnings.append(
                        f"chain {chain}, block {block.name}: {dead} replica(s) "
                        "rejected every post-burn-in proposal"
                    )
    acceptance = {
        name: (float(np.mean(rates)) if np.ndim(rates[0]) == 0 or rates[0].size == 1
               else np.mean(rates, axis=0))
        for name, rates in acc_accum.items()
    }
    samples = PosteriorSamples(
        parameter_names=names,
        draws=np.vstack(rows),
        chain_ids=np.array(chain_ids),
        thinning=settings.thinning,
        burn_in=settings.burn_in,
    )
    return McmcResult(samples=samples, acceptance=acceptance, warnings=warnings)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def _cov(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.cov(a, b, ddof=1)[0, 1])


def gelman_rubin(samples: PosteriorSamples, parameter: str) -> float:
    """Brooks-Gelman corrected potential scale reduction factor.

    Between/within variance ratio with the (d+3)/(d+1) sampling-variability
    correction, returned on the usual square-root (PSRF) scale.
    """
    chains = samples.by_chain(parameter)
    m = len(chains)
    if m < 2:
        raise McmcError("gelman_rubin requires at least two chains")
    n = min(len(c) for c in chains)
    if n < 50:
        raise McmcError("gelman_rubin requires at least 50 draws per chain")
    x = np.stack([c[:n] for c in chains])
    means = x.mean(axis=1)
    s2 = x.var(axis=1, ddof=1)
    w = float(s2.mean())
    if not np.isfinite(w) or w <= 0:
        raise McmcError("degenerate variance: within-chain variance is zero")
    b_over_n = float(means.var(ddof=1))
    sigma2 = (n - 1) / n * w + b_over_n
    v = sigma2 + b_over_n / m
    var_s2 = float(s2.var(ddof=1))
    xbar = float(means.mean())
    var_v = (
        ((n - 1) / n) ** 2 * var_s2 / m
        + ((m + 1) / (m * n)) ** 2 * (2.0 / (m - 1)) * (n * b_over_n) ** 2
        + 2.0
        * (m + 1)
        * (n - 1)
        / (m * n**2)
        * (n / m)
        * (_cov(s2, means**2) - 2.0 * xbar * _cov(s2, means))
    )
    if var_v > 0 and np.isfinite(var_v):
        d = 2.0 * v**2 / var_v
        factor = (d + 3.0) / (d + 1.0)
    else:
        factor = 1.0
    return float(np.sqrt(factor * v / w))


def autocorrelation(
    samples: PosteriorSamples, parameter: str, max_lag: int, chain: int = 0
) -> np.ndarray:
    """Sample autocorrelation of one chain at lags 0..max_lag (index = lag)."""
    chains = samples.by_chain(parameter)
    x = chains[chain]
    n = len(x)
    if n < 100:
        raise ValueError("autocorrelation requires at least 100 draws in the chain")
    if max_lag < 0 or max_lag >= n:
        raise ValueError("max_lag must lie in [0, n_draws)")
    xc = x - x.mean()
    c0 = float(xc @ xc) / n
    if c0 <= 0:
        raise ValueError("degenerate variance: constant chain")
    acf = np.empty(max_lag + 1)
    acf[0] = 1.0
    for k in range(1, max_lag + 1):
        acf[k] = float(xc[:-k] @ xc[k:]) / n / c0
    return acf


def effective_draws(samples: PosteriorSamples, parameter: str) -> float:
    """Effective draw count, initial-positive-sequence truncated, summed over chains."""
    total = 0.0
    for c, _ in enumerate(np.unique(samples.chain_ids)):
        x = samples.by_chain(parameter)[c]
        n = len(x)
        if n < 100:
            total += n
            continue
        acf = autocorrelation(samples, parameter, min(n - 1, 200), chain=c)
        s = 0.0
        for k in range(1, len(acf)):
            if acf[k] <= 0:
                break
            s += acf[k]
        total += n / (1.0 + 2.0 * s)
    return float(total)


def posterior_mcse(samples: PosteriorSamples, parameter: str) -> float:
    """Monte Carlo standard error of the posterior-mean estimate."""
    col = samples.column(parameter)
    neff = max(effective_draws(samples, parameter), 1.0)
    return float(col.std(ddof=1) / np.sqrt(neff))


def diagnostics_report(samples: PosteriorSamples, acceptance: dict | None = None) -> str:
    """Plain-text/CSV diagnostics: per-parameter R-hat, acf(1), effective draws."""
    lines = ["parameter,rhat,acf1,n_eff"]
    multi = samples.n_chains() >= 2
    for name in samples.parameter_names:
        try:
            rhat = f"{gelman_rubin(samples, name):.4f}" if multi else ""
        except McmcError:
            rhat = ""
        try:
            acf1 = f"{autocorrelation(samples, name, 1)[1]:.4f}"
        except ValueError:
            acf1 = ""
        lines.append(f"{name},{rhat},{acf1},{effective_draws(samples, name):.1f}")
    if acceptance:
        lines.append("")
        lines.append("block,mean_acceptance")
        for name, rate in acceptance.items():
            lines.append(f"{name},{np.mean(rate):.3f}")
    return "\n".join(lines) + "\n"
