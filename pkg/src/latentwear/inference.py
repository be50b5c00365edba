"""Posterior sampling and maximum-likelihood estimation of deterioration
rates and maintenance probabilities from an observed state panel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from . import hmm
from .ctmc import DEFAULT_RATE_BOUND, RateParams, deterioration_matrix, maintenance_matrix
from .mcmc import (
    ChainDiagnosticError,
    PosteriorDraws,
    SamplerOptions,
    adaptive_metropolis,
    chain_rng,
    effective_sample_size,
    ensemble_demc,
    split_rhat,
    summarize_draws,
)

RHAT_WARN = 1.05
STUCK_ACCEPTANCE = 0.01


@dataclass(frozen=True)
class PriorSpec:
    """Uniform(0, rate_bound) per rate; uniform(0, 1) per maintenance
    probability. The finite rate bound makes the prior proper (and hence
    drawable, which the calibration harness requires)."""

    rate_bound: float = DEFAULT_RATE_BOUND

    def __post_init__(self):
        if self.rate_bound <= 0:
            raise ValueError(f"rate_bound must be positive, got {self.rate_bound}")

    def sample(self, rng: np.random.Generator, periods: int = 1) -> np.ndarray:
        rates = rng.uniform(0.0, self.rate_bound, size=3 * periods)
        probs = rng.uniform(0.0, 1.0, size=2)
        return np.concatenate([rates, probs])


def param_names(periods: int) -> list[str]:
    if periods == 1:
        names = ["lambda1", "lambda2", "lambda3"]
    else:
        names = [
            f"lambda{i}_p{p}" for p in range(1, periods + 1) for i in (1, 2, 3)
        ]
    return names + ["p21", "p31"]


def default_breaks(periods: int, max_age: int) -> tuple[int, ...]:
    return tuple(math.ceil(i * max_age / periods) for i in range(1, periods)) + (max_age,)


def params_from_vector(
    theta: np.ndarray,
    breaks: tuple[int, ...],
    rate_bound: float = DEFAULT_RATE_BOUND,
) -> RateParams:
    periods = len(breaks)
    rates = tuple(
        (float(theta[3 * p]), float(theta[3 * p + 1]), float(theta[3 * p + 2]))
        for p in range(periods)
    )
    return RateParams(rates, breaks, float(theta[-2]), float(theta[-1]), rate_bound)


def vector_from_params(params: RateParams) -> np.ndarray:
    flat = [lam for triple in params.periods for lam in triple]
    return np.array(flat + [params.p21, params.p31])


def sample_posterior(
    panel,
    prior: PriorSpec = PriorSpec(),
    periods: int = 1,
    chains: int = 4,
    warmup: int = 1000,
    draws: int = 1000,
    seed: int | None = None,
    breaks: tuple[int, ...] | None = None,
    options: SamplerOptions = SamplerOptions(),
) -> PosteriorDraws:
    """MCMC over (rates, maintenance probabilities).

    Sampling runs on the unconstrained scale (log rates, logit probabilities)
    with Jacobian corrections; the rate bound is enforced by rejection. Draws
    are returned on the natural scale. The default kernel is the ensemble
    differential-evolution sampler (``warmup`` counts sweeps, ``draws`` kept
    draws per chain); ``options.kernel="rwm"`` selects single-walker adaptive
    random-walk Metropolis instead. Chains are independent given
    (seed, chain index) and a run is deterministic for a fixed seed.
    """
    if panel.n_ships == 0:
        raise ValueError("empty panel")
    if chains < 2:
        raise ValueError("need at least 2 chains for split diagnostics")
    if seed is None:
        raise ValueError("sample_posterior requires a seed")
    counts = hmm.state_counts(panel.states_matrix(), panel.max_age)
    if counts.sum() == 0:
        raise ValueError("panel has no observed states")
    if breaks is None:
        breaks = default_breaks(periods, panel.max_age)

    n_rates = 3 * periods
    log_bound = np.log(prior.rate_bound)

    def log_post(z: np.ndarray) -> float:
        zr, zp = z[:n_rates], z[n_rates:]
        if np.any(zr > log_bound):
            return -np.inf
        rates = np.exp(zr)
        probs = expit(zp)
        theta = np.concatenate([rates, probs])
        params = params_from_vector(theta, breaks, prior.rate_bound)
        ll = hmm.log_likelihood_from_counts(counts, params)
        # d theta / d z: exp for rates, sigmoid for probabilities (softplus
        # form stays finite when expit saturates)
        jac = float(np.sum(zr)) \
            - float(np.sum(np.logaddexp(0, zp) + np.logaddexp(0, -zp)))
        return ll + jac

    d = n_rates + 2
    all_draws = np.empty((chains, draws, d))
    acc = np.empty(chains)
    for c in range(chains):
        rng = chain_rng(seed, c, domain=0)
        if options.kernel == "demc":
            nw = options.walkers_for(d)
            init = np.array(
                [_init_unconstrained(log_post, prior, periods, rng) for _ in range(nw)]
            )
            keep_sweeps = -(-draws // nw)
            kept, acc[c] = ensemble_demc(log_post, init, warmup, keep_sweeps, rng, options)
            z_samples = kept.reshape(-1, d)[:draws]
        elif options.kernel == "rwm":
            z0 = _init_unconstrained(log_post, prior, periods, rng)
            z_samples, acc[c] = adaptive_metropolis(log_post, z0, warmup, draws, rng, options)
        else:
            raise ValueError(f"unknown kernel {options.kernel!r}")
        all_draws[c, :, :n_rates] = np.exp(z_samples[:, :n_rates])
        all_draws[c, :, n_rates:] = expit(z_samples[:, n_rates:])
        if acc[c] < STUCK_ACCEPTANCE:
            raise ChainDiagnosticError(
                f"chain {c} stuck: acceptance rate {acc[c]:.4f} < {STUCK_ACCEPTANCE}"
            )
        if np.all(z_samples == z_samples[0]):
            raise ChainDiagnosticError(f"chain {c} produced identical draws")

    rhat = split_rhat(all_draws)
    ess = effective_sample_size(all_draws)
    names = param_names(periods)
    warnings = [
        f"rhat {rhat[j]:.3f} > {RHAT_WARN} for {names[j]}"
        for j in range(len(names))
        if rhat[j] > RHAT_WARN
    ]
    return PosteriorDraws(names, all_draws, rhat, ess, acc, warnings)


def _init_unconstrained(log_post, prior: PriorSpec, periods: int, rng) -> np.ndarray:
    n_rates = 3 * periods
    for _ in range(100):
        theta = prior.sample(rng, periods)
        theta = np.clip(theta, 1e-10, None)
        theta[n_rates:] = np.clip(theta[n_rates:], 1e-10, 1 - 1e-10)
        z = np.concatenate([np.log(theta[:n_rates]), logit(theta[n_rates:])])
        if np.isfinite(log_post(z)):
            return z
    raise ChainDiagnosticError("no finite log posterior in 100 prior starts")


def mle(
    panel,
    periods: int = 1,
    restarts: int = 5,
    seed: int | None = None,
    breaks: tuple[int, ...] | None = None,
    rate_bound: float = DEFAULT_RATE_BOUND,
):
    """Maximum-likelihood point estimate via Nelder-Mead on the unconstrained
    scale (rates mapped through rate_bound * sigmoid), best of ``restarts``
    random starts plus a polish run from the winner. Returns
    (RateParams, log_likelihood)."""
    if panel.n_ships == 0:
        raise ValueError("empty panel")
    if seed is None:
        raise ValueError("mle requires a seed")
    counts = hmm.state_counts(panel.states_matrix(), panel.max_age)
    if counts.sum() == 0:
        raise ValueError("panel has no observed states")
    if breaks is None:
        breaks = default_breaks(periods, panel.max_age)
    n_rates = 3 * periods

    def unpack(z: np.ndarray) -> RateParams:
        rates = rate_bound * expit(z[:n_rates])
        probs = expit(z[n_rates:])
        return params_from_vector(np.concatenate([rates, probs]), breaks, rate_bound)

    def neg_ll(z: np.ndarray) -> float:
        return -hmm.log_likelihood_from_counts(counts, unpack(z))

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        lam0 = np.exp(rng.uniform(np.log(0.01), np.log(min(5.0, rate_bound)), n_rates))
        p0 = rng.uniform(0.05, 0.95, 2)
        z0 = np.concatenate([logit(lam0 / rate_bound), logit(p0)])
        res = minimize(neg_ll, z0, method="Nelder-Mead",
                       options={"maxiter": 2000, "xatol": 1e-8, "fatol": 1e-10})
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("all restarts produced non-finite likelihood")
    polished = minimize(neg_ll, best.x, method="Nelder-Mead",
                        options={"maxiter": 2000, "xatol": 1e-9, "fatol": 1e-12})
    if polished.fun < best.fun:
        best = polished
    return unpack(best.x), -float(best.fun)


def summarize(draws: PosteriorDraws) -> dict[str, dict[str, float]]:
    """Per-parameter mean, sd, 5/50/95% quantiles (linear interpolation),
    Rhat and ESS."""
    return summarize_draws(draws)


@dataclass
class DerivedMatrices:
    """Posterior distributions of the one-year deterioration matrices (one per
    period) and the maintenance matrix, pushed through each draw."""

    d_draws: np.ndarray  # (n_draws_total, n_periods, 3, 3)
    m_draws: np.ndarray  # (n_draws_total, 3, 3)

    @property
    def d_mean(self) -> np.ndarray:
        return self.d_draws.mean(axis=0)

    @property
    def d_sd(self) -> np.ndarray:
        return self.d_draws.std(axis=0, ddof=1)

    @property
    def m_mean(self) -> np.ndarray:
        return self.m_draws.mean(axis=0)

    @property
    def m_sd(self) -> np.ndarray:
        return self.m_draws.std(axis=0, ddof=1)

    def histogram(self, which: str, i: int, j: int, bins: int = 40,
                  period: int = 0):
        """(counts, edges) for one matrix entry across draws;
        ``which`` is 'D' or 'M', indices are 0-based row/column."""
        if which == "D":
            values = self.d_draws[:, period, i, j]
        elif which == "M":
            values = self.m_draws[:, i, j]
        else:
            raise ValueError(f"which must be 'D' or 'M', got {which!r}")
        return np.histogram(values, bins=bins)


def derived_matrices(draws: PosteriorDraws, t: float = 1.0) -> DerivedMatrices:
    flat = draws.flat()
    n = flat.shape[0]
    n_periods = (flat.shape[1] - 2) // 3
    d_draws = np.empty((n, n_periods, 3, 3))
    m_draws = np.empty((n, 3, 3))
    for i in range(n):
        row = flat[i]
        for p in range(n_periods):
            l1, l2, l3 = row[3 * p: 3 * p + 3]
            d_draws[i, p] = deterioration_matrix(l1, l2, l3, t)
        m_draws[i] = maintenance_matrix(row[-2], row[-1])
    return DerivedMatrices(d_draws, m_draws)
