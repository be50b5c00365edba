"""Forward evolution of the shared latent state distribution, categorical
log-likelihood of observed state panels, and state prediction.

The model has a single latent trajectory shared by every ship: yearly
maintenance (matrix M) composed with one year of deterioration (matrix D),
starting from d(0) = (1, 0, 0). Observed states are categorical draws from
the age-t distribution.
"""

from __future__ import annotations

import math

import numpy as np

from .ctmc import (
    RateParams,
    deterioration_entries,
    deterioration_matrix,
    maintenance_matrix,
    rates_for_age,
)

SIMPLEX_TOL = 1e-10

# floor applied to probabilities inside log() so impossible observations give a
# large finite penalty instead of NaN in optimizers/samplers
PROB_FLOOR = 1e-300


def _period_matrices(params: RateParams) -> list[np.ndarray]:
    """One-year deterioration matrix for each period (unit time step)."""
    return [deterioration_matrix(l1, l2, l3, 1.0) for (l1, l2, l3) in params.periods]


def evolve(params: RateParams, max_age: int | None = None) -> np.ndarray:
    """Latent state distributions for ages 1..max_age, shape (max_age, 3).

    Age 1 applies deterioration only; every later age applies maintenance then
    deterioration: d(t) = d(t-1) @ M @ D(t). The loop runs on scalars: this
    sits inside every sampler evaluation and numpy overhead dominates at 3x3.
    """
    if max_age is None:
        max_age = params.max_age
    if max_age < 1 or max_age > params.max_age:
        raise ValueError(
            f"max_age {max_age} outside the covered range 1..{params.max_age}"
        )
    d_entries = [deterioration_entries(l1, l2, l3, 1.0)
                 for (l1, l2, l3) in params.periods]
    p21, p31 = params.p21, params.p31

    rows = []
    period_idx = 0
    d1, d2, d3 = 1.0, 0.0, 0.0
    for age in range(1, max_age + 1):
        while age > params.breaks[period_idx]:
            period_idx += 1
        p11, p12, p13, p22, p23 = d_entries[period_idx]
        if age > 1:  # maintenance first: d <- d @ M
            d1, d2, d3 = d1 + p21 * d2 + p31 * d3, (1 - p21) * d2 + (1 - p31) * d3, 0.0
        # deterioration: d <- d @ D (upper triangular)
        d1, d2, d3 = d1 * p11, d1 * p12 + d2 * p22, d1 * p13 + d2 * p23 + d3
        rows.append((d1, d2, d3))
    out = np.array(rows)
    _check_trajectory(out)
    return out


def _check_trajectory(traj: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if np.any(traj < -tol):
        raise AssertionError(f"negative state probability: min {traj.min()}")
    err = np.max(np.abs(traj.sum(axis=1) - 1.0))
    if err > tol:
        raise AssertionError(f"state distribution sum off by {err}")


def is_state_distribution(d: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    d = np.asarray(d, dtype=float)
    return bool(d.shape == (3,) and np.all(d >= -tol) and abs(d.sum() - 1.0) <= tol)


def state_counts(states: np.ndarray, max_age: int) -> np.ndarray:
    """Aggregate an (n_ships, max_age) state matrix (0 = missing) into
    per-age counts of shape (max_age, 3)."""
    states = np.asarray(states)
    counts = np.zeros((max_age, 3), dtype=float)
    for s in (1, 2, 3):
        counts[:, s - 1] = (states == s).sum(axis=0)
    return counts


def log_likelihood_from_counts(counts, params: RateParams) -> float:
    """Categorical log-likelihood given per-age observed state counts.

    ``counts`` is an (max_age, 3) array or list of rows. The trajectory
    recursion here is the same scalar loop as ``evolve``, kept free of array
    construction and validation because this is the sampler's inner loop.
    """
    rows = counts.tolist() if isinstance(counts, np.ndarray) else list(counts)
    max_age = len(rows)
    if max_age < 1 or max_age > params.max_age:
        raise ValueError(
            f"panel max_age {max_age} outside the covered range 1..{params.max_age}"
        )
    d_entries = [deterioration_entries(l1, l2, l3, 1.0)
                 for (l1, l2, l3) in params.periods]
    p21, p31 = params.p21, params.p31
    log = math.log
    floor = PROB_FLOOR

    total = 0.0
    ll = 0.0
    period_idx = 0
    d1, d2, d3 = 1.0, 0.0, 0.0
    for age in range(1, max_age + 1):
        while age > params.breaks[period_idx]:
            period_idx += 1
        p11, p12, p13, p22, p23 = d_entries[period_idx]
        if age > 1:
            d1, d2, d3 = d1 + p21 * d2 + p31 * d3, (1 - p21) * d2 + (1 - p31) * d3, 0.0
        d1, d2, d3 = d1 * p11, d1 * p12 + d2 * p22, d1 * p13 + d2 * p23 + d3
        c1, c2, c3 = rows[age - 1]
        total += c1 + c2 + c3
        if c1:
            ll += c1 * log(d1 if d1 > floor else floor)
        if c2:
            ll += c2 * log(d2 if d2 > floor else floor)
        if c3:
            ll += c3 * log(d3 if d3 > floor else floor)
    if total == 0:
        raise ValueError("no observed states in panel")
    return ll


def log_likelihood(panel, params: RateParams) -> float:
    """Categorical log-likelihood of a StatePanel under the shared trajectory."""
    counts = state_counts(panel.states_matrix(), panel.max_age)
    return log_likelihood_from_counts(counts, params)


def predict_states(
    params: RateParams,
    max_age: int | None = None,
    rule: str = "argmax",
    seed: int | None = None,
) -> np.ndarray:
    """Predicted state per age, either the modal state (lowest index wins a
    tie) or a categorical draw per age."""
    traj = evolve(params, max_age)
    if rule == "argmax":
        return np.argmax(traj, axis=1) + 1
    if rule == "sample":
        if seed is None:
            raise ValueError("sample rule requires a seed")
        rng = np.random.default_rng(seed)
        u = rng.random(traj.shape[0])
        cdf = np.cumsum(traj, axis=1)
        idx = (u[:, None] > cdf).sum(axis=1).astype(np.int64)
        return np.minimum(idx, 2) + 1
    raise ValueError(f"unknown prediction rule {rule!r}")
