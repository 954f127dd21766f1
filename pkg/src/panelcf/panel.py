"""Panel data model, treatment masks, preprocessing and shared metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd


class PanelError(ValueError):
    """Raised when panel data or a treatment plan violates its invariants."""


@dataclass(frozen=True)
class PanelMatrix:
    """N x T outcome matrix with unit and time labels.

    ``time_ids`` must be strictly increasing integers. ``values`` may hold NaN
    before preprocessing; estimators expect a complete matrix.
    """

    values: np.ndarray
    unit_ids: tuple
    time_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "time_ids", tuple(int(t) for t in self.time_ids))
        if values.ndim != 2:
            raise PanelError("values must be a 2-d matrix")
        n, t = values.shape
        if n < 2 or t < 2:
            raise PanelError(f"panel must be at least 2x2, got {n}x{t}")
        if len(self.unit_ids) != n or len(self.time_ids) != t:
            raise PanelError("label lengths do not match the value matrix")
        if len(set(self.unit_ids)) != n:
            raise PanelError("unit_ids must be unique")
        if np.any(np.diff(self.time_ids) <= 0):
            raise PanelError("time_ids must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def unit_index(self, unit) -> int:
        try:
            return self.unit_ids.index(unit)
        except ValueError:
            raise PanelError(f"unknown unit {unit!r}") from None

    def time_index(self, time) -> int:
        try:
            return self.time_ids.index(int(time))
        except ValueError:
            raise PanelError(f"time {time!r} outside the panel's time range") from None

    def select_units(self, units: Sequence) -> "PanelMatrix":
        idx = [self.unit_index(u) for u in units]
        return PanelMatrix(self.values[idx], [self.unit_ids[i] for i in idx], self.time_ids)

    def select_periods(self, stop: int) -> "PanelMatrix":
        """Keep the first ``stop`` columns."""
        return PanelMatrix(self.values[:, :stop], self.unit_ids, self.time_ids[:stop])

    def with_values(self, values: np.ndarray) -> "PanelMatrix":
        return PanelMatrix(values, self.unit_ids, self.time_ids)

    def to_long(self, name: str = "value") -> pd.DataFrame:
        n, t = self.shape
        return pd.DataFrame(
            {
                "unit": np.repeat(np.array(self.unit_ids, dtype=object), t),
                "time": np.tile(np.array(self.time_ids), n),
                name: self.values.ravel(),
            }
        )


@dataclass(frozen=True)
class TreatmentPlan:
    """Adoption times for treated units.

    ``adoption_time`` maps a treated unit to T0_i, the last period in which it
    is observed untreated. Units absent from the mapping are controls.
    """

    adoption_time: Mapping
    unit_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(
            self, "adoption_time", {u: int(t) for u, t in dict(self.adoption_time).items()}
        )
        unknown = [u for u in self.adoption_time if u not in self.unit_ids]
        if unknown:
            raise PanelError(f"treatment plan references unknown unit {unknown[0]!r}")
        if self.treated_count < 1:
            raise PanelError("treatment plan needs at least one treated unit")
        if self.control_count < 1:
            raise PanelError("treatment plan needs at least one control unit")

    @property
    def treated_count(self) -> int:
        return len(self.adoption_time)

    @property
    def control_count(self) -> int:
        return len(self.unit_ids) - len(self.adoption_time)

    @property
    def treated_units(self) -> list:
        return [u for u in self.unit_ids if u in self.adoption_time]

    @property
    def control_units(self) -> list:
        return [u for u in self.unit_ids if u not in self.adoption_time]

    def treated_rows(self) -> np.ndarray:
        return np.array([i for i, u in enumerate(self.unit_ids) if u in self.adoption_time], dtype=int)

    def control_rows(self) -> np.ndarray:
        return np.array([i for i, u in enumerate(self.unit_ids) if u not in self.adoption_time], dtype=int)

    def restrict(self, units: Sequence) -> "TreatmentPlan":
        keep = set(units)
        return TreatmentPlan({u: t for u, t in self.adoption_time.items() if u in keep}, list(units))


@dataclass(frozen=True)
class Mask:
    """Binary N x T matrix: 1 marks a missing (treated, post-adoption) cell."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries).astype(bool)
        if entries.ndim != 2:
            raise PanelError("mask must be 2-d")
        object.__setattr__(self, "entries", entries)

    @property
    def missing(self) -> np.ndarray:
        return self.entries

    @property
    def observed(self) -> np.ndarray:
        return ~self.entries

    @property
    def n_missing(self) -> int:
        return int(self.entries.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def pre_lengths(self) -> np.ndarray:
        """Number of leading observed columns per row (T for never-treated rows)."""
        m = self.entries
        first = np.where(m.any(axis=1), m.argmax(axis=1), m.shape[1])
        return first

    def validate(self) -> None:
        m = self.entries.astype(int)
        if np.any(np.diff(m, axis=1) < 0):
            raise PanelError("mask rows must be absorbing (no 1 -> 0 transition)")
        if np.any(m[:, 0] == 1):
            raise PanelError("every treated row needs at least one observed pre-period")


def build_mask(plan: TreatmentPlan, n_units: int, n_periods: int, time_ids: Optional[Sequence[int]] = None) -> Mask:
    """Missingness matrix for a treatment plan.

    Treated row i is observed up to and including the column of T0_i and
    missing strictly afterwards. ``time_ids`` defaults to ``range(1, T+1)``.
    """
    if len(plan.unit_ids) != n_units:
        raise PanelError("plan covers a different number of units than the panel")
    times = list(range(1, n_periods + 1)) if time_ids is None else [int(t) for t in time_ids]
    if len(times) != n_periods:
        raise PanelError("time_ids length does not match n_periods")
    entries = np.zeros((n_units, n_periods), dtype=bool)
    for i, unit in enumerate(plan.unit_ids):
        if unit not in plan.adoption_time:
            continue
        t0 = plan.adoption_time[unit]
        if t0 not in times:
            raise PanelError(f"adoption time {t0} of unit {unit!r} outside the time range")
        k = times.index(t0)
        if k == n_periods - 1:
            raise PanelError(f"unit {unit!r} adopts in the final period; no post-period")
        entries[i, k + 1:] = True
    return Mask(entries)


def plan_from_mask(mask: Mask, unit_ids: Sequence, time_ids: Sequence[int]) -> TreatmentPlan:
    """Inverse of :func:`build_mask` for absorbing masks."""
    mask.validate()
    pre = mask.pre_lengths()
    adoption = {}
    for i, u in enumerate(unit_ids):
        if pre[i] < len(time_ids):
            adoption[u] = int(time_ids[pre[i] - 1])
    return TreatmentPlan(adoption, unit_ids)


@dataclass(frozen=True)
class CovariateSet:
    """Unit covariates (N x P, column-normalized) and optional unit-time covariates (N x T x R)."""

    unit_covariates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    names: tuple = ()
    unit_time_covariates: Optional[np.ndarray] = None
    unit_time_names: tuple = ()

    @classmethod
    def empty(cls, n_units: int) -> "CovariateSet":
        return cls(np.zeros((n_units, 0)))

    @classmethod
    def from_raw(cls, raw: np.ndarray, names: Sequence[str] = (), unit_time: Optional[np.ndarray] = None,
                 unit_time_names: Sequence[str] = ()) -> "CovariateSet":
        """Normalize raw unit covariates to mean 0, sd 1; drop zero-variance columns."""
        import warnings

        raw = np.asarray(raw, dtype=float)
        if raw.ndim == 1:
            raw = raw[:, None]
        names = list(names) if names else [f"x{p}" for p in range(raw.shape[1])]
        if np.any(~np.isfinite(raw)):
            raise PanelError("unit covariates contain missing values")
        sd = raw.std(axis=0)
        keep = sd > 1e-12
        if not np.all(keep):
            dropped = [n for n, k in zip(names, keep) if not k]
            warnings.warn(f"dropping zero-variance covariates {dropped}", stacklevel=2)
        raw = raw[:, keep]
        names = [n for n, k in zip(names, keep) if k]
        x = (raw - raw.mean(axis=0)) / raw.std(axis=0) if raw.shape[1] else raw
        if unit_time is not None:
            unit_time = np.asarray(unit_time, dtype=float)
            if unit_time.ndim == 2:
                unit_time = unit_time[:, :, None]
            if np.any(~np.isfinite(unit_time)):
                raise PanelError("unit-time covariates contain missing values")
        return cls(x, tuple(names), unit_time, tuple(unit_time_names))

    @property
    def n_covariates(self) -> int:
        return self.unit_covariates.shape[1] if self.unit_covariates.ndim == 2 else 0

    def check_normalized(self, tol: float = 1e-8) -> None:
        x = self.unit_covariates
        if x.size == 0:
            return
        if np.any(np.abs(x.mean(axis=0)) > tol) or np.any(np.abs(x.std(axis=0) - 1) > tol):
            raise PanelError("unit covariates are not column-normalized")

    def select_units(self, rows: Sequence[int]) -> "CovariateSet":
        """Subset rows without re-normalizing (used for bootstrap and placebo splits)."""
        rows = np.asarray(rows, dtype=int)
        x = self.unit_covariates[rows] if self.unit_covariates.size else np.zeros((len(rows), 0))
        ut = None if self.unit_time_covariates is None else self.unit_time_covariates[rows]
        return CovariateSet(x, self.names, ut, self.unit_time_names)


@dataclass(frozen=True)
class PreprocessConfig:
    """How raw long-format outcomes become a complete panel.

    ``deflator`` maps time -> price index; ``population`` is a long frame with
    columns ``unit, time, population``. Either may be None (identity).
    """

    deflator: Optional[Mapping[int, float]] = None
    population: Optional[pd.DataFrame] = None
    split_time: Optional[int] = None
    log_transform: bool = False
    drop_constant_pre: bool = True


@dataclass
class PreprocessReport:
    dropped_units: list = field(default_factory=list)
    imputed_cells: int = 0
    imputed_by_unit: dict = field(default_factory=dict)


def _fill_regime(block: np.ndarray) -> np.ndarray:
    """LOCF then NOCB along rows of one regime."""
    df = pd.DataFrame(block.T)
    return df.ffill().bfill().to_numpy().T


def preprocess_with_report(raw: pd.DataFrame, config: PreprocessConfig) -> tuple[PanelMatrix, PreprocessReport]:
    """Deflate, scale, impute within regimes, log-transform and screen units."""
    missing_cols = {"unit", "time", "value"} - set(raw.columns)
    if missing_cols:
        raise PanelError(f"raw outcomes lack columns {sorted(missing_cols)}")
    if raw.duplicated(["unit", "time"]).any():
        row = raw[raw.duplicated(["unit", "time"])].iloc[0]
        raise PanelError(f"duplicate (unit, time) row: ({row['unit']!r}, {row['time']})")
    # units keep their order of first appearance; periods are sorted
    wide = raw.pivot(index="unit", columns="time", values="value")
    wide = wide.reindex(index=pd.unique(raw["unit"]), columns=sorted(wide.columns))
    units = list(wide.index)
    times = [int(t) for t in wide.columns]
    values = wide.to_numpy(dtype=float)

    if config.deflator is not None:
        defl = np.array([config.deflator.get(t, np.nan) for t in times], dtype=float)
        if np.any(~np.isfinite(defl)) or np.any(defl <= 0):
            raise PanelError("deflator must be positive over the panel's time range")
        values = values / defl[None, :]
    if config.population is not None:
        pop = config.population.pivot(index="unit", columns="time", values="population")
        pop = pop.reindex(index=units, columns=times).to_numpy(dtype=float)
        need = np.isfinite(values)
        if np.any(need & ~(np.isfinite(pop) & (pop > 0))):
            raise PanelError("population must be positive wherever outcomes are observed")
        values = np.where(need, values / np.where(need, pop, 1.0), np.nan)

    was_missing = ~np.isfinite(values)
    t_arr = np.array(times)
    if config.split_time is None:
        regimes = [np.ones(len(times), dtype=bool)]
    else:
        pre = t_arr <= config.split_time
        regimes = [r for r in (pre, ~pre) if r.any()]
    filled = values.copy()
    for cols in regimes:
        block = values[:, cols]
        empty = ~np.isfinite(block).any(axis=1)
        if empty.any():
            unit = units[int(np.argmax(empty))]
            raise PanelError(f"unit {unit!r} has no observations in a regime")
        filled[:, cols] = _fill_regime(block)

    if config.log_transform:
        if np.any(filled <= 0):
            i, j = np.argwhere(filled <= 0)[0]
            raise PanelError(f"nonpositive value for unit {units[i]!r} at time {times[j]} under log transform")
        filled = np.log(filled)

    report = PreprocessReport()
    keep = np.ones(len(units), dtype=bool)
    if config.drop_constant_pre:
        pre_cols = np.ones(len(times), dtype=bool) if config.split_time is None else t_arr <= config.split_time
        if pre_cols.sum() >= 1:
            keep = filled[:, pre_cols].std(axis=1) > 0
    report.dropped_units = [u for u, k in zip(units, keep) if not k]
    imputed = was_missing & keep[:, None]
    report.imputed_cells = int(imputed.sum())
    report.imputed_by_unit = {u: int(imputed[i].sum()) for i, u in enumerate(units) if imputed[i].any()}
    panel = PanelMatrix(filled[keep], [u for u, k in zip(units, keep) if k], times)
    return panel, report


def preprocess(raw: pd.DataFrame, config: PreprocessConfig) -> PanelMatrix:
    return preprocess_with_report(raw, config)[0]


def rmse(actual, predicted, evaluate) -> float:
    """Root-mean squared error over the cells flagged in ``evaluate``."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    sel = evaluate.entries if isinstance(evaluate, Mask) else np.asarray(evaluate, dtype=bool)
    if actual.shape != predicted.shape or actual.shape != sel.shape:
        raise PanelError("rmse inputs are not conformable")
    if not sel.any():
        raise PanelError("rmse evaluation set is empty")
    diff = actual[sel] - predicted[sel]
    return float(np.sqrt(np.mean(diff ** 2)))


def gini(sizes) -> float:
    """Gini coefficient from the mean absolute pairwise difference."""
    x = np.asarray(sizes, dtype=float).ravel()
    if x.size == 0:
        raise PanelError("gini needs at least one value")
    if np.any(x < 0):
        raise PanelError("farm sizes must be nonnegative")
    mu = x.mean()
    if mu == 0:
        return 0.0
    # sorted form of sum_ij |x_i - x_j| / (2 n^2 mu)
    xs = np.sort(x)
    n = xs.size
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * xs) / (n * n * mu))


def expand_bins(midpoints, counts) -> np.ndarray:
    """Microdata stand-in for binned farm-size tables: each bin's midpoint repeated count times."""
    counts = np.asarray(counts)
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise PanelError("bin counts must be nonnegative integers")
    return np.repeat(np.asarray(midpoints, dtype=float), counts.astype(int))


def adjusted_gini(farm_sizes, n_farms: int, n_adult_males: int) -> float:
    """Farm-size Gini corrected for landless adults: 1 - (farms/adults) * (1 - G)."""
    if n_adult_males <= 0:
        raise PanelError("number of adult males must be positive")
    if n_farms < 1 or n_farms > n_adult_males:
        raise PanelError("need 1 <= n_farms <= n_adult_males")
    g = gini(farm_sizes)
    return float(1.0 - (n_farms / n_adult_males) * (1.0 - g))
