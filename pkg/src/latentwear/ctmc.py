"""Three-state transition machinery: rate matrix, deterioration and maintenance
matrices, and a series-based matrix exponential used as an independent oracle.

Convention: all stochastic matrices are row-stochastic and act on row state
vectors, i.e. ``m[i, j] = P(next = j | current = i)`` with states 0, 1, 2
standing for {Normal, NearFailure, Failure}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RATE_BOUND = 50.0

ROW_SUM_TOL = 1e-10


@dataclass(frozen=True)
class RateParams:
    """Deterioration rates per age period plus maintenance probabilities.

    ``periods[i]`` is the (lambda1, lambda2, lambda3) triple in force for ages
    ``breaks[i-1]+1 .. breaks[i]`` (with an implicit 0 before the first break).
    ``breaks`` must be strictly increasing and end at the max age covered.
    """

    periods: tuple[tuple[float, float, float], ...]
    breaks: tuple[int, ...]
    p21: float
    p31: float
    rate_bound: float = DEFAULT_RATE_BOUND

    def __post_init__(self):
        if len(self.periods) != len(self.breaks):
            raise ValueError(
                f"{len(self.periods)} rate periods but {len(self.breaks)} breakpoints"
            )
        if not self.periods:
            raise ValueError("at least one rate period is required")
        for triple in self.periods:
            if len(triple) != 3:
                raise ValueError(f"rate triple expected, got {triple!r}")
            for lam in triple:
                if not (0.0 <= lam <= self.rate_bound):
                    raise ValueError(
                        f"rate {lam} outside [0, {self.rate_bound}]"
                    )
        if any(b <= 0 for b in self.breaks) or any(
            b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])
        ):
            raise ValueError(f"breakpoints must be strictly increasing: {self.breaks}")
        for p, name in ((self.p21, "p21"), (self.p31, "p31")):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name}={p} outside [0, 1]")

    @property
    def max_age(self) -> int:
        return self.breaks[-1]

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @classmethod
    def homogeneous(cls, l1, l2, l3, p21, p31, max_age=31, rate_bound=DEFAULT_RATE_BOUND):
        """Single-period parameters covering ages 1..max_age."""
        return cls(((float(l1), float(l2), float(l3)),), (int(max_age),),
                   float(p21), float(p31), rate_bound)

    @classmethod
    def equal_periods(cls, rates, p21, p31, max_age=31, rate_bound=DEFAULT_RATE_BOUND):
        """Partition 1..max_age into len(rates) near-equal periods.

        Breaks fall at ceil(i * max_age / P); for 31 ages and 4 periods this
        puts them after ages 8, 16 and 24.
        """
        rates = tuple(tuple(float(x) for x in r) for r in rates)
        n = len(rates)
        breaks = tuple(math.ceil(i * max_age / n) for i in range(1, n)) + (int(max_age),)
        return cls(rates, breaks, float(p21), float(p31), rate_bound)


def rates_for_age(params: RateParams, age: int) -> tuple[float, float, float]:
    """Rate triple of the period whose age interval contains ``age``."""
    if not isinstance(age, (int, np.integer)):
        raise ValueError(f"age must be an integer, got {age!r}")
    if age < 1 or age > params.max_age:
        raise ValueError(f"age {age} outside covered range 1..{params.max_age}")
    for triple, brk in zip(params.periods, params.breaks):
        if age <= brk:
            return triple
    raise AssertionError("unreachable: breaks cover 1..max_age")


def build_rate_matrix(l1: float, l2: float, l3: float) -> np.ndarray:
    """Upper-triangular 3x3 generator with absorbing third state."""
    for lam in (l1, l2, l3):
        if lam < 0:
            raise ValueError(f"negative rate {lam}")
    q = np.array(
        [
            [-(l1 + l2), l1, l2],
            [0.0, -l3, l3],
            [0.0, 0.0, 0.0],
        ]
    )
    return q


def expm(q: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(Q t) by scaling-and-squaring of the truncated power series.

    Kept free of library matrix exponentials on purpose: this is the oracle
    the closed-form deterioration matrix is checked against. Terms are summed
    until they fall below 1e-20 relative, giving truncation error well under
    1e-12 after squaring for the generator magnitudes used here.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (q.shape[0], q.shape[0]):
        raise ValueError(f"square matrix required, got shape {q.shape}")
    if t < 0:
        raise ValueError(f"negative time {t}")
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite entries in generator")

    a = q * t
    norm = np.max(np.abs(a).sum(axis=1))  # infinity norm
    n_square = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    a = a / (2.0 ** n_square)

    n = a.shape[0]
    result = np.eye(n)
    term = np.eye(n)
    scale = max(1.0, np.max(np.abs(result)))
    for r in range(1, 60):
        term = term @ a / r
        result = result + term
        if np.max(np.abs(term)) < 1e-20 * scale:
            break
    for _ in range(n_square):
        result = result @ result
    return result


def _phi(z: float) -> float:
    """(1 - exp(-z)) / z, the removable singularity factor, accurate for all z >= 0.

    Below 1e-6 * t the direct expm1 form and the series agree to ~1e-18; the
    series branch exists so that z == 0 (the exact singular point) returns the
    analytic limit 1 instead of 0/0.
    """
    if abs(z) < 1e-6:
        return 1.0 - z / 2.0 + z * z / 6.0
    return -math.expm1(-z) / z


def deterioration_entries(l1: float, l2: float, l3: float, t: float = 1.0):
    """The five free entries (p11, p12, p13, p22, p23) of the closed-form
    exp(Q t), as plain floats (samplers evaluate this thousands of times).

    p11 = exp(-(l1+l2) t), p22 = exp(-l3 t) and
    p12 = l1 * exp(-l3 t) * (1 - exp(-(l1+l2-l3) t)) / (l1+l2-l3),
    with the removable singularity at l1+l2 == l3 evaluated by series.
    p13/p23 follow from row-stochastic completion (clamped against -1e-17
    style round-off); the third state is absorbing.
    """
    for lam in (l1, l2, l3):
        if lam < 0:
            raise ValueError(f"negative rate {lam}")
    if t < 0:
        raise ValueError(f"negative time {t}")
    a = l1 + l2
    p11 = math.exp(-a * t)
    p22 = math.exp(-l3 * t)
    # l1 * (exp(-l3 t) - exp(-a t)) / (a - l3), written via phi for stability
    p12 = min(l1 * t * p22 * _phi((a - l3) * t), 1.0 - p11)
    p13 = max(1.0 - p11 - p12, 0.0)
    p23 = max(1.0 - p22, 0.0)
    return p11, p12, p13, p22, p23


def deterioration_matrix(l1: float, l2: float, l3: float, t: float = 1.0) -> np.ndarray:
    """Closed-form exp(Q t) as a row-stochastic matrix; see
    ``deterioration_entries`` for the formulas."""
    p11, p12, p13, p22, p23 = deterioration_entries(l1, l2, l3, t)
    d = np.array(
        [
            [p11, p12, p13],
            [0.0, p22, p23],
            [0.0, 0.0, 1.0],
        ]
    )
    _check_row_stochastic(d, "deterioration matrix")
    return d


def maintenance_matrix(p21: float, p31: float) -> np.ndarray:
    """Imperfect-repair matrix applied once per year before deterioration."""
    for p, name in ((p21, "p21"), (p31, "p31")):
        if not (0.0 <= p <= 1.0):
            raise ValueError(f"{name}={p} outside [0, 1]")
    m = np.array(
        [
            [1.0, 0.0, 0.0],
            [p21, 1.0 - p21, 0.0],
            [p31, 1.0 - p31, 0.0],
        ]
    )
    _check_row_stochastic(m, "maintenance matrix")
    return m


def _check_row_stochastic(m: np.ndarray, what: str, tol: float = ROW_SUM_TOL) -> None:
    if np.any(m < -tol) or np.any(m > 1 + tol):
        raise AssertionError(f"{what} has entries outside [0, 1]: {m}")
    sums = m.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise AssertionError(f"{what} rows do not sum to 1: {sums}")


def is_row_stochastic(m: np.ndarray, tol: float = ROW_SUM_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    return bool(
        np.all(m >= -tol)
        and np.all(m <= 1 + tol)
        and np.max(np.abs(m.sum(axis=1) - 1.0)) <= tol
    )
