"""Hierarchical additive Gaussian-process imputation of missing failure
counts.

The additive normal effects (age / ship / engine intercepts) and the two
exponentiated-quadratic GP layers (per-ship over age, per-engine over age) are
marginalized into a single structured covariance over cells, so only the
hyperparameters are sampled. A cell is identified by (ship j, age t) with
engine type k[j]; the covariance between two cells is

    sigma_age^2  * 1[t = t']
  + sigma_ship^2 * 1[j = j']
  + sigma_eng^2  * 1[k = k']
  + 1[j = j'] * eq_kernel(t, t'; alpha_g, l_g)
  + 1[k = k'] * eq_kernel(t, t'; alpha_d, l_d)
  + sigma_noise[k]^2 * 1[same cell]

with a constant mean mu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .fleet import FleetPanel, ShipRecord
from .mcmc import (
    ChainDiagnosticError,
    PosteriorDraws,
    SamplerOptions,
    adaptive_metropolis,
    chain_rng,
    effective_sample_size,
    split_rhat,
)


class KernelFactorizationError(RuntimeError):
    """Raised when the covariance cannot be factorized after jitter escalation."""


# positive scale parameters are sampled as floor + exp(z); the floor keeps the
# degenerate-data MAP finite instead of running to -inf on the log scale
SIGMA_FLOOR = 1e-6

JITTER_REL = 1e-8
JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class GPHyperParams:
    mu: float
    sigma_age: float
    sigma_ship: float
    sigma_engine: float
    sigma_noise: tuple[float, ...]  # one per engine type
    alpha_gamma: float
    l_gamma: float
    alpha_delta: float
    l_delta: float
    k_gamma: float = 2.0
    lambda_gamma: float = 7.75
    k_delta: float = 2.0
    lambda_delta: float = 7.75

    def __post_init__(self):
        pos = {
            "sigma_age": self.sigma_age,
            "sigma_ship": self.sigma_ship,
            "sigma_engine": self.sigma_engine,
            "alpha_gamma": self.alpha_gamma,
            "l_gamma": self.l_gamma,
            "alpha_delta": self.alpha_delta,
            "l_delta": self.l_delta,
            "k_gamma": self.k_gamma,
            "lambda_gamma": self.lambda_gamma,
            "k_delta": self.k_delta,
            "lambda_delta": self.lambda_delta,
        }
        for name, v in pos.items():
            if not v > 0:
                raise ValueError(f"{name} must be strictly positive, got {v}")
        if not self.sigma_noise or any(not s > 0 for s in self.sigma_noise):
            raise ValueError(f"sigma_noise entries must be positive, got {self.sigma_noise}")


@dataclass(frozen=True)
class GPPrior:
    """Prior constants; None fields are resolved from the panel at fit time
    (length-scale Weibull scale = max_age / 4, half-normal scale for sigmas
    and alphas = 2 * sd of observed cells, mu prior centered on the observed
    mean with sd 4 * observed sd)."""

    k_gamma: float = 2.0
    lambda_gamma: float | None = None
    k_delta: float = 2.0
    lambda_delta: float | None = None
    sigma_scale: float | None = None
    mu_loc: float | None = None
    mu_scale: float | None = None

    def resolve(self, panel: FleetPanel) -> "GPPrior":
        observed = panel.observed_values()
        if observed.size < 2:
            raise ValueError("prior resolution needs at least 2 observed cells")
        sd = float(np.std(observed, ddof=1))
        if sd == 0.0:
            sd = 1.0  # constant panel: fall back to unit spread
        return replace(
            self,
            lambda_gamma=self.lambda_gamma or panel.max_age / 4.0,
            lambda_delta=self.lambda_delta or panel.max_age / 4.0,
            sigma_scale=self.sigma_scale or 2.0 * sd,
            mu_loc=self.mu_loc if self.mu_loc is not None else float(np.mean(observed)),
            mu_scale=self.mu_scale or 4.0 * sd,
        )


@dataclass
class StructuredKernel:
    """Gram matrix over panel cells, with the (ship index, age) pair list."""

    gram: np.ndarray
    cells: list[tuple[int, int]]

    def validate(self, tol_scale: float = 1e-8) -> None:
        g = self.gram
        if not np.allclose(g, g.T, atol=1e-12):
            raise AssertionError("kernel is not symmetric")
        eig = np.linalg.eigvalsh(g)
        tol = tol_scale * max(eig.max(), 1e-300)
        if eig.min() < -tol:
            raise AssertionError(f"kernel not PSD: min eigenvalue {eig.min()}")


@dataclass
class ImputationResult:
    filled: FleetPanel
    sd: np.ndarray  # (n_ships, max_age); 0 at observed cells
    hyper_draws: PosteriorDraws | None = None


def eq_kernel(x_i, x_j, alpha: float, l: float) -> float:
    """Exponentiated-quadratic covariance alpha^2 exp(-||xi-xj||^2 / (2 l^2))."""
    if l <= 0:
        raise ValueError(f"length-scale must be positive, got {l}")
    if alpha < 0:
        raise ValueError(f"amplitude must be nonnegative, got {alpha}")
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    x_j = np.atleast_1d(np.asarray(x_j, dtype=float))
    if x_i.shape != x_j.shape:
        raise ValueError(f"dimension mismatch: {x_i.shape} vs {x_j.shape}")
    sq = float(np.sum((x_i - x_j) ** 2))
    return alpha ** 2 * math.exp(-sq / (2.0 * l ** 2))


def _cell_arrays(panel: FleetPanel, cells):
    ships = np.array([c[0] for c in cells], dtype=np.int64)
    ages = np.array([c[1] for c in cells], dtype=float)
    etypes = panel.engine_types()[ships]
    return ships, ages, etypes


def _kernel_matrix(panel: FleetPanel, cells, hp: GPHyperParams) -> np.ndarray:
    ships, ages, etypes = _cell_arrays(panel, cells)
    same_ship = ships[:, None] == ships[None, :]
    same_eng = etypes[:, None] == etypes[None, :]
    same_age = ages[:, None] == ages[None, :]
    sq = (ages[:, None] - ages[None, :]) ** 2

    k = hp.sigma_age ** 2 * same_age
    k = k + hp.sigma_ship ** 2 * same_ship
    k = k + hp.sigma_engine ** 2 * same_eng
    k = k + same_ship * (hp.alpha_gamma ** 2 * np.exp(-sq / (2.0 * hp.l_gamma ** 2)))
    k = k + same_eng * (hp.alpha_delta ** 2 * np.exp(-sq / (2.0 * hp.l_delta ** 2)))
    noise = np.array([hp.sigma_noise[e - 1] ** 2 for e in etypes])
    k[np.diag_indices_from(k)] += noise
    return k


def observed_cells(panel: FleetPanel) -> list[tuple[int, int]]:
    m = panel.counts_matrix()
    return [(i, t + 1) for i, t in zip(*np.nonzero(~np.isnan(m)))]


def missing_cells(panel: FleetPanel) -> list[tuple[int, int]]:
    m = panel.counts_matrix()
    return [(i, t + 1) for i, t in zip(*np.nonzero(np.isnan(m)))]


def assemble_kernel(panel: FleetPanel, hp: GPHyperParams) -> StructuredKernel:
    """Structured covariance over the observed cells of the panel."""
    cells = observed_cells(panel)
    if not cells:
        raise ValueError("panel has no observed cells")
    return StructuredKernel(_kernel_matrix(panel, cells, hp), cells)


def _chol_with_jitter(k: np.ndarray):
    """Lower Cholesky factor after relative jitter, escalating x10 up to
    three times; returns (L, jitter_used)."""
    n = k.shape[0]
    jitter = JITTER_REL * np.trace(k) / n
    for _ in range(JITTER_ESCALATIONS + 1):
        try:
            lo = cholesky(k + jitter * np.eye(n), lower=True)
            return lo, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise KernelFactorizationError(
        f"covariance factorization failed after {JITTER_ESCALATIONS} jitter escalations"
    )


def log_marginal(panel: FleetPanel, hp: GPHyperParams) -> float:
    """Multivariate-normal log density of the observed cells under the
    marginalized structured covariance and constant mean mu."""
    kern = assemble_kernel(panel, hp)
    y = panel.observed_values()
    lo, _ = _chol_with_jitter(kern.gram)
    r = y - hp.mu
    alpha = cho_solve((lo, True), r)
    n = y.size
    return float(
        -0.5 * (n * math.log(2.0 * math.pi) + 2.0 * np.sum(np.log(np.diag(lo))) + r @ alpha)
    )


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------


def hyper_param_names(n_engine_types: int) -> list[str]:
    names = ["mu", "sigma_age", "sigma_ship", "sigma_engine"]
    names += [f"sigma_noise_{k}" for k in range(1, n_engine_types + 1)]
    names += ["alpha_gamma", "l_gamma", "alpha_delta", "l_delta"]
    return names


def hyperparams_from_vector(theta: np.ndarray, n_engine_types: int,
                            prior: GPPrior) -> GPHyperParams:
    e = n_engine_types
    return GPHyperParams(
        mu=float(theta[0]),
        sigma_age=float(theta[1]),
        sigma_ship=float(theta[2]),
        sigma_engine=float(theta[3]),
        sigma_noise=tuple(float(v) for v in theta[4: 4 + e]),
        alpha_gamma=float(theta[4 + e]),
        l_gamma=float(theta[5 + e]),
        alpha_delta=float(theta[6 + e]),
        l_delta=float(theta[7 + e]),
        k_gamma=prior.k_gamma,
        lambda_gamma=prior.lambda_gamma,
        k_delta=prior.k_delta,
        lambda_delta=prior.lambda_delta,
    )


def sample_prior(prior: GPPrior, n_engine_types: int,
                 rng: np.random.Generator) -> GPHyperParams:
    """One draw of the full hyperprior (length-scales via the scaled-Weibull
    reparametrization l = l_s * lambda with l_s ~ Weibull(k, 1))."""
    hn = lambda: abs(rng.normal(0.0, prior.sigma_scale)) + SIGMA_FLOOR
    l_gamma = (rng.weibull(prior.k_gamma) + SIGMA_FLOOR) * prior.lambda_gamma
    l_delta = (rng.weibull(prior.k_delta) + SIGMA_FLOOR) * prior.lambda_delta
    return GPHyperParams(
        mu=rng.normal(prior.mu_loc, prior.mu_scale),
        sigma_age=hn(),
        sigma_ship=hn(),
        sigma_engine=hn(),
        sigma_noise=tuple(hn() for _ in range(n_engine_types)),
        alpha_gamma=hn(),
        l_gamma=l_gamma,
        alpha_delta=hn(),
        l_delta=l_delta,
        k_gamma=prior.k_gamma,
        lambda_gamma=prior.lambda_gamma,
        k_delta=prior.k_delta,
        lambda_delta=prior.lambda_delta,
    )


def _log_prior_and_jacobian(z: np.ndarray, n_engine_types: int, prior: GPPrior):
    """Log prior density plus log |d theta / d z| for the sampling transform
    theta = (mu, floor + exp(z)...); length-scale entries are the *scaled*
    l = (floor + exp(z)) * lambda with l_s ~ Weibull(k, 1)."""
    e = n_engine_types
    mu = z[0]
    lp = -0.5 * ((mu - prior.mu_loc) / prior.mu_scale) ** 2
    # half-normal components: sigma_age, sigma_ship, sigma_engine, noise, alphas
    hn_idx = [1, 2, 3, *range(4, 4 + e), 4 + e, 6 + e]
    for i in hn_idx:
        s = SIGMA_FLOOR + math.exp(z[i])
        lp += -0.5 * (s / prior.sigma_scale) ** 2 + z[i]
    for i, k in ((5 + e, prior.k_gamma), (7 + e, prior.k_delta)):
        ls = SIGMA_FLOOR + math.exp(z[i])  # the Weibull(k, 1) variable
        lp += math.log(k) + (k - 1.0) * math.log(ls) - ls ** k + z[i]
    return lp


def _theta_from_z(z: np.ndarray, n_engine_types: int, prior: GPPrior) -> np.ndarray:
    theta = np.empty_like(z)
    theta[0] = z[0]
    theta[1:] = SIGMA_FLOOR + np.exp(z[1:])
    e = n_engine_types
    theta[5 + e] *= prior.lambda_gamma  # l_gamma = l_s * lambda
    theta[7 + e] *= prior.lambda_delta
    return theta


def _z_from_hyperparams(hp: GPHyperParams, prior: GPPrior) -> np.ndarray:
    vals = [hp.sigma_age, hp.sigma_ship, hp.sigma_engine, *hp.sigma_noise,
            hp.alpha_gamma, hp.l_gamma / prior.lambda_gamma,
            hp.alpha_delta, hp.l_delta / prior.lambda_delta]
    z = [hp.mu] + [math.log(max(v - SIGMA_FLOOR, SIGMA_FLOOR / 2)) for v in vals]
    return np.array(z)


def fit_hyperparams(
    panel: FleetPanel,
    prior: GPPrior | None = None,
    method: str = "mcmc",
    budget: int = 500,
    seed: int | None = None,
    chains: int = 2,
    warmup: int | None = None,
    options: SamplerOptions = SamplerOptions(),
) -> PosteriorDraws:
    """Posterior over GP hyperparameters.

    ``mcmc`` runs adaptive random-walk Metropolis with ``budget`` kept draws
    per chain (warmup defaults to the same); ``optimize`` returns the MAP
    point from a Nelder-Mead search with 10 restarts as a single draw.
    """
    if seed is None:
        raise ValueError("fit_hyperparams requires a seed")
    prior = (prior or GPPrior()).resolve(panel)
    e = panel.n_engine_types
    names = hyper_param_names(e)
    d = len(names)
    if panel.observed_values().size == 0:
        raise ValueError("panel has no observed cells")

    def log_post(z: np.ndarray) -> float:
        theta = _theta_from_z(z, e, prior)
        hp = hyperparams_from_vector(theta, e, prior)
        try:
            lm = log_marginal(panel, hp)
        except KernelFactorizationError:
            return -np.inf
        return lm + _log_prior_and_jacobian(z, e, prior)

    def init_z(rng) -> np.ndarray:
        for _ in range(100):
            z = _z_from_hyperparams(sample_prior(prior, e, rng), prior)
            if np.isfinite(log_post(z)):
                return z
        raise ChainDiagnosticError("no finite log posterior in 100 prior starts")

    if method == "optimize":
        rng = chain_rng(seed, 0, domain=1)
        best = None
        for _ in range(10):
            res = minimize(lambda z: -log_post(z), init_z(rng), method="Nelder-Mead",
                           options={"maxiter": 4000, "xatol": 1e-8, "fatol": 1e-10})
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise RuntimeError("all MAP restarts produced non-finite posterior")
        theta = _theta_from_z(best.x, e, prior)
        draws = theta[None, None, :]
        nan = np.full(d, np.nan)
        return PosteriorDraws(names, draws, nan, nan, np.array([np.nan]))

    if method != "mcmc":
        raise ValueError(f"unknown method {method!r}")
    if warmup is None:
        warmup = budget
    if chains < 2:
        raise ValueError("need at least 2 chains for split diagnostics")

    all_draws = np.empty((chains, budget, d))
    acc = np.empty(chains)
    for c in range(chains):
        rng = chain_rng(seed, c, domain=1)
        z_samples, acc[c] = adaptive_metropolis(
            log_post, init_z(rng), warmup, budget, rng, options
        )
        for i in range(budget):
            all_draws[c, i] = _theta_from_z(z_samples[i], e, prior)
        if acc[c] < 0.01:
            raise ChainDiagnosticError(
                f"hyperparameter chain {c} stuck: acceptance {acc[c]:.4f}"
            )
    rhat = split_rhat(all_draws)
    ess = effective_sample_size(all_draws)
    warns = [f"rhat {rhat[j]:.3f} > 1.05 for {names[j]}"
             for j in range(d) if rhat[j] > 1.05]
    return PosteriorDraws(names, all_draws, rhat, ess, acc, warns)


# ---------------------------------------------------------------------------
# imputation
# ---------------------------------------------------------------------------


def impute(panel: FleetPanel, hp_draws: PosteriorDraws | GPHyperParams,
           mode: str = "mean", seed: int | None = None,
           prior: GPPrior | None = None) -> ImputationResult:
    """Fill missing cells by GP conditioning on the observed ones.

    ``mean`` averages the conditional means over hyperparameter draws;
    ``sample`` draws one joint sample per hyper-draw and returns the last.
    Per-cell sd aggregates across draws by the law of total variance.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    obs = observed_cells(panel)
    if not obs:
        raise ValueError("panel has no observed cells")
    miss = missing_cells(panel)

    counts = panel.counts_matrix()
    sd = np.zeros_like(counts)
    if not miss:
        return ImputationResult(panel.with_counts(counts), sd,
                                hp_draws if isinstance(hp_draws, PosteriorDraws) else None)

    if isinstance(hp_draws, GPHyperParams):
        hp_list = [hp_draws]
        draws_out = None
    else:
        prior_resolved = (prior or GPPrior()).resolve(panel)
        hp_list = [
            hyperparams_from_vector(row, panel.n_engine_types, prior_resolved)
            for row in hp_draws.flat()
        ]
        draws_out = hp_draws
    if not hp_list:
        raise ValueError("at least one hyperparameter draw is required")

    if mode == "sample":
        if seed is None:
            raise ValueError("sample mode requires a seed")
        rng = np.random.default_rng(seed)

    y = panel.observed_values()
    cells = obs + miss
    n_obs = len(obs)
    means, variances = [], []
    last_sample = None
    for hp in hp_list:
        k_full = _kernel_matrix(panel, cells, hp)
        k_oo = k_full[:n_obs, :n_obs]
        k_om = k_full[:n_obs, n_obs:]
        k_mm = k_full[n_obs:, n_obs:]
        lo, _ = _chol_with_jitter(k_oo)
        cond_mean = hp.mu + k_om.T @ cho_solve((lo, True), y - hp.mu)
        v = solve_triangular(lo, k_om, lower=True)
        means.append(cond_mean)
        variances.append(np.maximum(np.diag(k_mm) - np.sum(v * v, axis=0), 0.0))
        if mode == "sample":
            cond_cov = k_mm - v.T @ v
            l_cond, _ = _chol_with_jitter(cond_cov)
            last_sample = cond_mean + l_cond @ rng.standard_normal(len(miss))

    means = np.array(means)
    variances = np.array(variances)
    total_var = variances.mean(axis=0) + means.var(axis=0)
    fill_values = means.mean(axis=0) if mode == "mean" else last_sample

    filled = np.array(counts)
    for (i, t), v, s in zip(miss, fill_values, np.sqrt(total_var)):
        filled[i, t - 1] = v
        sd[i, t - 1] = s
    return ImputationResult(panel.with_counts(filled), sd, draws_out)


def simulate_counts_panel(
    hp: GPHyperParams,
    n_ships: int,
    max_age: int,
    n_engine_types: int = 1,
    missingness: float = 0.0,
    seed: int | None = None,
) -> FleetPanel:
    """Draw a synthetic counts panel from the generative model (used by the
    recovery tests and for demo data)."""
    if seed is None:
        raise ValueError("simulate_counts_panel requires a seed")
    rng = np.random.default_rng(seed)
    ships = [
        ShipRecord(f"s{i + 1:03d}", (i % n_engine_types) + 1, np.full(max_age, np.nan))
        for i in range(n_ships)
    ]
    panel = FleetPanel(ships, max_age, n_engine_types)
    cells = [(i, t) for i in range(n_ships) for t in range(1, max_age + 1)]
    k = _kernel_matrix(panel, cells, hp)
    lo, _ = _chol_with_jitter(k)
    y = hp.mu + lo @ rng.standard_normal(len(cells))
    counts = y.reshape(n_ships, max_age)
    if missingness > 0.0:
        mask = rng.random(counts.shape) < missingness
        counts = np.where(mask, np.nan, counts)
    return panel.with_counts(counts)
