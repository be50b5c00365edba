"""Failure-count panel ingestion, standardization, three-state classification,
and synthetic state-panel generation.

CSV schemas (shared with the CLI):
  counts: header ``ship_id,engine_type,age,count`` with an empty count for a
          missing cell; absent (ship, age) rows are missing too.
  states: header ``ship_id,engine_type,age,state`` with state in {1,2,3} and
          an empty state for a missing cell.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import hmm
from .ctmc import RateParams


class PanelFormatError(ValueError):
    """Raised when an input file violates the panel schema."""


@dataclass
class ShipRecord:
    ship_id: str
    engine_type: int
    counts: np.ndarray  # float, shape (max_age,), NaN = missing


@dataclass
class FleetPanel:
    ships: list[ShipRecord]
    max_age: int
    n_engine_types: int

    def __post_init__(self):
        seen = set()
        for rec in self.ships:
            if rec.ship_id in seen:
                raise PanelFormatError(f"duplicate ship_id {rec.ship_id!r}")
            seen.add(rec.ship_id)
            if rec.counts.shape != (self.max_age,):
                raise PanelFormatError(
                    f"ship {rec.ship_id!r} has {rec.counts.shape[0]} ages, "
                    f"panel max_age is {self.max_age}"
                )
            if not (1 <= rec.engine_type <= self.n_engine_types):
                raise PanelFormatError(
                    f"ship {rec.ship_id!r} engine_type {rec.engine_type} outside "
                    f"[1, {self.n_engine_types}]"
                )
            observed = rec.counts[~np.isnan(rec.counts)]
            if observed.size and not np.all(np.isfinite(observed)):
                raise PanelFormatError(f"non-finite count for ship {rec.ship_id!r}")

    @property
    def n_ships(self) -> int:
        return len(self.ships)

    def counts_matrix(self) -> np.ndarray:
        return np.array([rec.counts for rec in self.ships])

    def engine_types(self) -> np.ndarray:
        return np.array([rec.engine_type for rec in self.ships], dtype=np.int64)

    def ship_ids(self) -> list[str]:
        return [rec.ship_id for rec in self.ships]

    def observed_values(self) -> np.ndarray:
        m = self.counts_matrix()
        return m[~np.isnan(m)]

    def with_counts(self, counts: np.ndarray) -> "FleetPanel":
        """Copy of the panel with cell values replaced (same shape/ships)."""
        ships = [
            ShipRecord(rec.ship_id, rec.engine_type, np.array(counts[i], dtype=float))
            for i, rec in enumerate(self.ships)
        ]
        return FleetPanel(ships, self.max_age, self.n_engine_types)


@dataclass
class StateRecord:
    ship_id: str
    engine_type: int
    states: np.ndarray  # int, shape (max_age,), 0 = missing


@dataclass
class StatePanel:
    ships: list[StateRecord]
    max_age: int
    n_engine_types: int

    def __post_init__(self):
        for rec in self.ships:
            bad = set(np.unique(rec.states)) - {0, 1, 2, 3}
            if bad:
                raise PanelFormatError(
                    f"ship {rec.ship_id!r} has states outside {{1,2,3}}: {sorted(bad)}"
                )

    @property
    def n_ships(self) -> int:
        return len(self.ships)

    def states_matrix(self) -> np.ndarray:
        return np.array([rec.states for rec in self.ships], dtype=np.int64)

    def ship_ids(self) -> list[str]:
        return [rec.ship_id for rec in self.ships]

    def engine_types(self) -> np.ndarray:
        return np.array([rec.engine_type for rec in self.ships], dtype=np.int64)

    def subset(self, indices) -> "StatePanel":
        ships = [self.ships[i] for i in indices]
        return StatePanel(ships, self.max_age, self.n_engine_types)


@dataclass(frozen=True)
class StateThresholds:
    """Classification boundaries on the standardized scale, plus the
    standardizing transform that produced them."""

    b1: float
    b2: float
    lo: float
    hi: float
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if not (self.lo < self.b1 < self.b2 < self.hi):
            raise ValueError(
                f"thresholds must satisfy lo < b1 < b2 < hi, got "
                f"({self.lo}, {self.b1}, {self.b2}, {self.hi})"
            )

    def to_json(self) -> str:
        return json.dumps(
            {"b1": self.b1, "b2": self.b2, "lo": self.lo, "hi": self.hi,
             "mean": self.mean, "sd": self.sd},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "StateThresholds":
        d = json.loads(text)
        return cls(d["b1"], d["b2"], d["lo"], d["hi"],
                   d.get("mean", 0.0), d.get("sd", 1.0))


def load_panel(path, max_age: int | None = None,
               n_engine_types: int | None = None) -> FleetPanel:
    """Read a counts CSV into a FleetPanel.

    Duplicate (ship_id, age) cells are rejected with both offending row
    numbers; ages must be integers in [1, max_age] (max_age inferred from the
    data when not given).
    """
    rows = _read_csv_rows(path, value_col="count")
    if not rows:
        raise PanelFormatError(f"no records in {path}")

    inferred_max = max(r[2] for r in rows)
    if max_age is None:
        max_age = inferred_max
    inferred_types = max(r[1] for r in rows)
    if n_engine_types is None:
        n_engine_types = inferred_types

    cells: dict[tuple[str, int], tuple[float, int]] = {}
    order: list[str] = []
    engine: dict[str, int] = {}
    for ship_id, etype, age, value, lineno in rows:
        if age < 1 or age > max_age:
            raise PanelFormatError(
                f"{path} row {lineno}: age {age} outside [1, {max_age}]"
            )
        key = (ship_id, age)
        if key in cells:
            raise PanelFormatError(
                f"{path}: duplicate cell ship_id={ship_id!r} age={age} "
                f"at rows {cells[key][1]} and {lineno}"
            )
        if value is not None and value < 0:
            raise PanelFormatError(
                f"{path} row {lineno}: negative count {value}"
            )
        cells[key] = (value, lineno)
        if ship_id not in engine:
            engine[ship_id] = etype
            order.append(ship_id)
        elif engine[ship_id] != etype:
            raise PanelFormatError(
                f"{path} row {lineno}: ship {ship_id!r} listed with engine types "
                f"{engine[ship_id]} and {etype}"
            )

    ships = []
    for ship_id in order:
        counts = np.full(max_age, np.nan)
        for age in range(1, max_age + 1):
            entry = cells.get((ship_id, age))
            if entry is not None and entry[0] is not None:
                counts[age - 1] = entry[0]
        ships.append(ShipRecord(ship_id, engine[ship_id], counts))
    return FleetPanel(ships, max_age, n_engine_types)


def load_state_panel(path, max_age: int | None = None,
                     n_engine_types: int | None = None) -> StatePanel:
    """Read a states CSV (``ship_id,engine_type,age,state``) into a StatePanel."""
    rows = _read_csv_rows(path, value_col="state")
    if not rows:
        raise PanelFormatError(f"no records in {path}")
    if max_age is None:
        max_age = max(r[2] for r in rows)
    if n_engine_types is None:
        n_engine_types = max(r[1] for r in rows)

    cells: dict[tuple[str, int], tuple[float, int]] = {}
    order: list[str] = []
    engine: dict[str, int] = {}
    for ship_id, etype, age, value, lineno in rows:
        if age < 1 or age > max_age:
            raise PanelFormatError(
                f"{path} row {lineno}: age {age} outside [1, {max_age}]"
            )
        key = (ship_id, age)
        if key in cells:
            raise PanelFormatError(
                f"{path}: duplicate cell ship_id={ship_id!r} age={age} "
                f"at rows {cells[key][1]} and {lineno}"
            )
        if value is not None and (value != int(value) or int(value) not in (1, 2, 3)):
            raise PanelFormatError(
                f"{path} row {lineno}: state {value} not in {{1,2,3}}"
            )
        cells[key] = (value, lineno)
        if ship_id not in engine:
            engine[ship_id] = etype
            order.append(ship_id)

    ships = []
    for ship_id in order:
        states = np.zeros(max_age, dtype=np.int64)
        for age in range(1, max_age + 1):
            entry = cells.get((ship_id, age))
            if entry is not None and entry[0] is not None:
                states[age - 1] = int(entry[0])
        ships.append(StateRecord(ship_id, engine[ship_id], states))
    return StatePanel(ships, max_age, n_engine_types)


def _read_csv_rows(path, value_col: str):
    """Parse the shared 4-column schema; returns
    (ship_id, engine_type, age, value-or-None, line_number) tuples."""
    expected = ["ship_id", "engine_type", "age", value_col]
    rows = []
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise PanelFormatError(f"input file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"no records in {path}") from None
        if [h.strip() for h in header] != expected:
            raise PanelFormatError(
                f"{path}: expected header {','.join(expected)!r}, "
                f"got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise PanelFormatError(
                    f"{path} row {lineno}: expected 4 columns, got {len(row)}"
                )
            ship_id = row[0].strip()
            try:
                etype = int(row[1])
            except ValueError:
                raise PanelFormatError(
                    f"{path} row {lineno}: engine_type {row[1]!r} is not an integer"
                ) from None
            try:
                age = int(row[2])
            except ValueError:
                raise PanelFormatError(
                    f"{path} row {lineno}: age {row[2]!r} is not an integer"
                ) from None
            raw = row[3].strip()
            if raw == "":
                value = None
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise PanelFormatError(
                        f"{path} row {lineno}: {value_col} {raw!r} is not numeric"
                    ) from None
                if not np.isfinite(value):
                    raise PanelFormatError(
                        f"{path} row {lineno}: non-finite {value_col} {raw!r}"
                    )
            rows.append((ship_id, etype, age, value, lineno))
    return rows


def write_panel(panel: FleetPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ship_id", "engine_type", "age", "count"])
        for rec in panel.ships:
            for age in range(1, panel.max_age + 1):
                v = rec.counts[age - 1]
                w.writerow([rec.ship_id, rec.engine_type, age,
                            "" if np.isnan(v) else repr(float(v))])


def write_state_panel(panel: StatePanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ship_id", "engine_type", "age", "state"])
        for rec in panel.ships:
            for age in range(1, panel.max_age + 1):
                s = rec.states[age - 1]
                w.writerow([rec.ship_id, rec.engine_type, age,
                            "" if s == 0 else int(s)])


def standardize(panel: FleetPanel, by_engine: bool = False):
    """Center and scale observed cells; returns (panel, mean, sd).

    Pooled fleet-wide by default (one mean/sd over all observed cells, sample
    sd with n-1); ``by_engine`` standardizes each engine type separately and
    returns per-type arrays instead of scalars.
    """
    counts = panel.counts_matrix()
    if not by_engine:
        observed = counts[~np.isnan(counts)]
        mean, sd = _mean_sd(observed)
        out = (counts - mean) / sd
        return panel.with_counts(out), mean, sd

    etypes = panel.engine_types()
    means = np.full(panel.n_engine_types, np.nan)
    sds = np.full(panel.n_engine_types, np.nan)
    out = np.array(counts)
    for k in range(1, panel.n_engine_types + 1):
        block = counts[etypes == k]
        observed = block[~np.isnan(block)]
        if observed.size == 0:
            continue
        means[k - 1], sds[k - 1] = _mean_sd(observed)
        out[etypes == k] = (block - means[k - 1]) / sds[k - 1]
    return panel.with_counts(out), means, sds


def _mean_sd(observed: np.ndarray) -> tuple[float, float]:
    if observed.size < 2:
        raise ValueError(
            f"standardization needs at least 2 observed cells, got {observed.size}"
        )
    mean = float(np.mean(observed))
    sd = float(np.std(observed, ddof=1))
    if sd == 0.0:
        raise ValueError("zero variance: all observed cells are identical")
    return mean, sd


def fit_thresholds(panel: FleetPanel, mean: float = 0.0, sd: float = 1.0) -> StateThresholds:
    """Tertile boundaries of the observed standardized values.

    Quantiles use linear interpolation of the empirical CDF; lo/hi are the
    observed extremes. ``mean``/``sd`` record the transform that produced the
    standardized panel so the thresholds file is self-contained.
    """
    observed = panel.observed_values()
    if observed.size < 3:
        raise ValueError(
            f"threshold fitting needs at least 3 observed cells, got {observed.size}"
        )
    b1, b2 = np.quantile(observed, [1.0 / 3.0, 2.0 / 3.0])
    lo, hi = float(observed.min()), float(observed.max())
    return StateThresholds(float(b1), float(b2), lo, hi, mean, sd)


def classify(panel: FleetPanel, th: StateThresholds) -> StatePanel:
    """Map standardized values to states: 1 below b1, 2 in [b1, b2), 3 at or
    above b2. Values outside [lo, hi] still classify by the two boundaries."""
    counts = panel.counts_matrix()
    states = np.zeros(counts.shape, dtype=np.int64)
    observed = ~np.isnan(counts)
    v = counts[observed]
    s = np.where(v < th.b1, 1, np.where(v < th.b2, 2, 3))
    states[observed] = s
    ships = [
        StateRecord(rec.ship_id, rec.engine_type, states[i])
        for i, rec in enumerate(panel.ships)
    ]
    return StatePanel(ships, panel.max_age, panel.n_engine_types)


def simulate_panel(
    params: RateParams,
    shape: tuple[int, int, int],
    missingness: float = 0.0,
    seed: int | None = None,
) -> StatePanel:
    """Draw an (n_ships, max_age, n_engine_types)-shaped synthetic state panel.

    States are independent categorical draws from the shared latent trajectory;
    cells are then masked missing i.i.d. at the given rate. Engine types are
    assigned round-robin (they do not enter the state model).
    """
    n_ships, max_age, n_engine_types = shape
    if not (0.0 <= missingness < 1.0):
        raise ValueError(f"missingness {missingness} outside [0, 1)")
    if seed is None:
        raise ValueError("simulate_panel requires a seed")
    traj = hmm.evolve(params, max_age)
    rng = np.random.default_rng(seed)

    u = rng.random((n_ships, max_age))
    cdf = np.cumsum(traj, axis=1)  # (max_age, 3)
    states = np.minimum((u[:, :, None] > cdf[None, :, :]).sum(axis=2), 2) + 1
    if missingness > 0.0:
        mask = rng.random((n_ships, max_age)) < missingness
        states[mask] = 0

    width = len(str(n_ships))
    ships = [
        StateRecord(f"s{i + 1:0{width}d}", (i % n_engine_types) + 1,
                    states[i].astype(np.int64))
        for i in range(n_ships)
    ]
    return StatePanel(ships, max_age, n_engine_types)
