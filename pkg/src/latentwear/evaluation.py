"""Train/test split orchestration, state-series MSE, and the repeated-split
experiment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hmm, inference
from .fleet import StatePanel
from .mcmc import ChainDiagnosticError, chain_rng
from .runtime import parallel_map


@dataclass(frozen=True)
class SplitSpec:
    n_test: int = 5
    n_repeats: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_test < 1:
            raise ValueError(f"n_test must be positive, got {self.n_test}")
        if self.n_repeats < 1:
            raise ValueError(f"n_repeats must be positive, got {self.n_repeats}")


@dataclass(frozen=True)
class FitConfig:
    fitter: str = "mle"  # or "mcmc" (posterior-mean plug-in)
    periods: int = 1
    restarts: int = 3
    chains: int = 2
    warmup: int = 400
    draws: int = 400
    rate_bound: float = 50.0


@dataclass
class MSEReport:
    train_mse: np.ndarray
    test_mse: np.ndarray
    failed: list[int] = field(default_factory=list)

    @property
    def mean_train(self) -> float:
        return float(np.mean(self.train_mse))

    @property
    def mean_test(self) -> float:
        return float(np.mean(self.test_mse))

    def histogram(self, bins: int = 30):
        """(train_counts, test_counts, edges) over a common bin grid."""
        both = np.concatenate([self.train_mse, self.test_mse])
        edges = np.histogram_bin_edges(both, bins=bins)
        train_counts, _ = np.histogram(self.train_mse, bins=edges)
        test_counts, _ = np.histogram(self.test_mse, bins=edges)
        return train_counts, test_counts, edges


def mse(observed: np.ndarray, predicted: np.ndarray, sum_over_age: bool = False) -> float:
    """Mean squared state gap between observed series and the shared predicted
    series: (1/N)(1/T_i) sum_i sum_t (obs_i(t) - pred(t))^2.

    Missing observed cells (state 0) are skipped and the per-ship normalizer
    shrinks accordingly; ships with no scored ages drop out of N.
    ``sum_over_age`` drops the per-age normalizer (the unnormalized variant).
    """
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape[1] != predicted.shape[0]:
        raise ValueError(
            f"age ranges do not match: observed {observed.shape[1]}, "
            f"predicted {predicted.shape[0]}"
        )
    scored = observed != 0
    per_ship_n = scored.sum(axis=1)
    keep = per_ship_n > 0
    if not np.any(keep):
        raise ValueError("no scored cells")
    sq = np.where(scored, (observed - predicted[None, :]) ** 2, 0.0)
    ship_sums = sq.sum(axis=1)[keep]
    if sum_over_age:
        per_ship = ship_sums
    else:
        per_ship = ship_sums / per_ship_n[keep]
    return float(per_ship.mean())


def state_occupancy(panel: StatePanel) -> np.ndarray:
    """Fraction of observed ships in each state per age, shape (max_age, 3)."""
    if panel.n_ships == 0:
        raise ValueError("empty panel")
    states = panel.states_matrix()
    counts = hmm.state_counts(states, panel.max_age)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(totals > 0, counts / totals, 0.0)
    return freq


def _fit_point_estimate(train: StatePanel, cfg: FitConfig, seed: int):
    if cfg.fitter == "mle":
        params, _ = inference.mle(
            train, periods=cfg.periods, restarts=cfg.restarts,
            seed=seed, rate_bound=cfg.rate_bound,
        )
        return params
    if cfg.fitter == "mcmc":
        post = inference.sample_posterior(
            train, inference.PriorSpec(cfg.rate_bound), cfg.periods,
            cfg.chains, cfg.warmup, cfg.draws, seed=seed,
        )
        theta = post.flat().mean(axis=0)
        breaks = inference.default_breaks(cfg.periods, train.max_age)
        return inference.params_from_vector(theta, breaks, cfg.rate_bound)
    raise ValueError(f"unknown fitter {cfg.fitter!r}")


def _one_split(args):
    panel, spec, cfg, r = args
    rng = chain_rng(spec.seed, r, domain=3)
    test_idx = rng.choice(panel.n_ships, size=spec.n_test, replace=False)
    test_mask = np.zeros(panel.n_ships, dtype=bool)
    test_mask[test_idx] = True
    train = panel.subset(np.nonzero(~test_mask)[0])
    test = panel.subset(np.nonzero(test_mask)[0])
    fit_seed = int(rng.integers(0, 2 ** 31 - 1))
    try:
        params = _fit_point_estimate(train, cfg, fit_seed)
    except (ChainDiagnosticError, RuntimeError, ValueError):
        return r, None
    predicted = hmm.predict_states(params, panel.max_age, rule="argmax")
    return r, (
        mse(train.states_matrix(), predicted),
        mse(test.states_matrix(), predicted),
    )


def run_splits(panel: StatePanel, spec: SplitSpec,
               fit_config: FitConfig = FitConfig()) -> MSEReport:
    """Repeat: hold out n_test ships, fit on the rest, score both sides.

    Deterministic for a fixed spec.seed; a repeat whose fit fails is recorded
    and more than 5% failures aborts the experiment.
    """
    if panel.n_ships < spec.n_test + 2:
        raise ValueError(
            f"panel has {panel.n_ships} ships; need at least {spec.n_test + 2}"
        )
    results = parallel_map(
        _one_split, [(panel, spec, fit_config, r) for r in range(spec.n_repeats)]
    )
    failed = [r for r, v in results if v is None]
    if len(failed) > 0.05 * spec.n_repeats:
        raise RuntimeError(
            f"{len(failed)}/{spec.n_repeats} split fits failed"
        )
    pairs = [v for _, v in results if v is not None]
    train = np.array([p[0] for p in pairs])
    test = np.array([p[1] for p in pairs])
    return MSEReport(train, test, failed)
