"""Synthetic panels and the two placebo protocols.

``run_placebo_suite`` hides post-period blocks of randomly chosen control
units and scores each estimator on them. ``backdating_test`` truncates a real
panel at the earliest adoption, moves the adoption date back by ``tau`` and
tests the zero-effect null on the backdated window.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from . import estimators as est
from .inference import SCHEMES, compute_effects, randomization_tests
from .panel import CovariateSet, Mask, PanelError, PanelMatrix, TreatmentPlan, build_mask, rmse
from .pipeline import fit_counterfactuals

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    N: int = 30
    T: int = 60
    rank: int = 3
    noise_sd: float = 0.1
    effect_size: float = 0.0
    effects: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 or self.T < 2:
            raise ValueError("synthetic panel must be at least 2x2")
        if not 1 <= self.rank <= min(self.N, self.T):
            raise ValueError(f"rank must lie in [1, {min(self.N, self.T)}]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


@dataclass
class SyntheticTruth:
    """Components of a generated panel; ``values = L + gamma + delta + noise``."""

    L: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    noise: np.ndarray

    @property
    def signal(self) -> np.ndarray:
        return self.L + self.gamma[:, None] + self.delta[None, :]


def generate_synthetic_panel(spec: SyntheticSpec) -> tuple[PanelMatrix, SyntheticTruth]:
    """Low-rank plus optional two-way effects plus Gaussian noise.

    Factors are standard normal, so entries of ``U V'`` have variance ``rank``.
    ``effect_size`` is ignored here; use :func:`plant_effect` once a treatment
    plan exists.
    """
    rng = np.random.default_rng(spec.seed)
    U = rng.standard_normal((spec.N, spec.rank))
    V = rng.standard_normal((spec.T, spec.rank))
    L = U @ V.T
    if spec.effects:
        gamma = rng.standard_normal(spec.N)
        delta = rng.standard_normal(spec.T)
    else:
        gamma = np.zeros(spec.N)
        delta = np.zeros(spec.T)
    noise = spec.noise_sd * rng.standard_normal((spec.N, spec.T))
    truth = SyntheticTruth(L, gamma, delta, noise)
    values = truth.signal + noise
    panel = PanelMatrix(values, [f"u{i:03d}" for i in range(spec.N)], range(1, spec.T + 1))
    return panel, truth


def plant_effect(panel: PanelMatrix, mask: Mask, effect: float) -> PanelMatrix:
    """Add a constant effect to every missing (treated, post) cell."""
    return panel.with_values(panel.values + effect * mask.entries)


@dataclass(frozen=True)
class PlaceboConfig:
    treated_fraction: float = 0.5
    t0_ratios: tuple = (0.25, 0.5, 0.75)
    n_trials: int = 20
    adoption: str = "staggered"
    estimators: tuple = tuple(est.ESTIMATORS)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "t0_ratios", tuple(float(r) for r in self.t0_ratios))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not 0 < self.treated_fraction < 1:
            raise ValueError("treated_fraction must lie in (0, 1)")
        if not self.t0_ratios or any(not 0 < r < 1 for r in self.t0_ratios):
            raise ValueError("t0_ratios must lie in (0, 1)")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.adoption not in ("staggered", "simultaneous"):
            raise ValueError("adoption must be 'staggered' or 'simultaneous'")
        if len(set(self.estimators)) != len(self.estimators):
            raise ValueError("duplicate estimator names")


@dataclass
class PlaceboReport:
    """Per-trial RMSE in tidy form plus its per-(estimator, ratio) summary."""

    trials: pd.DataFrame
    config: PlaceboConfig = field(repr=False, default=None)

    @property
    def summary(self) -> pd.DataFrame:
        g = self.trials.groupby(["estimator", "ratio"], sort=True)["rmse"]
        out = g.agg(mean="mean", sd=lambda s: s.std(ddof=1) if s.size > 1 else 0.0, n="size").reset_index()
        out["lower"] = out["mean"] - 1.96 * out["sd"]
        out["upper"] = out["mean"] + 1.96 * out["sd"]
        return out

    def mean(self, estimator: str, ratio: float) -> float:
        s = self.summary
        row = s[(s.estimator == estimator) & np.isclose(s.ratio, ratio)]
        return float(row["mean"].iloc[0])

    def sd(self, estimator: str, ratio: float) -> float:
        s = self.summary
        row = s[(s.estimator == estimator) & np.isclose(s.ratio, ratio)]
        return float(row["sd"].iloc[0])


EstimatorLike = Union[str, Callable]


def _resolve(estimators, custom: Optional[Mapping[str, Callable]]):
    custom = dict(custom or {})
    out = {}
    for name in estimators:
        out[name] = custom[name] if name in custom else est.get(name)
    return out


def placebo_assignment(n_units: int, n_periods: int, ratio: float, config: PlaceboConfig,
                       rng: np.random.Generator) -> Mask:
    """Pseudo-treated rows and their pre-period lengths for one trial.

    Staggered trials draw each unit's pre-period length uniformly within
    +/- 10% of T around ``ratio * T``; simultaneous trials share one length.
    """
    q = int(round(config.treated_fraction * n_units))
    if q < 1 or q >= n_units:
        raise PanelError(f"treated_fraction {config.treated_fraction} leaves {q} treated of {n_units} units")
    rows = np.sort(rng.choice(n_units, q, replace=False))
    centre = ratio * n_periods
    if config.adoption == "simultaneous":
        pre = np.full(q, int(round(centre)))
    else:
        half = 0.1 * n_periods
        pre = np.rint(rng.uniform(centre - half, centre + half, q)).astype(int)
    pre = np.clip(pre, 1, n_periods - 1)
    entries = np.zeros((n_units, n_periods), dtype=bool)
    for r, p in zip(rows, pre):
        entries[r, p:] = True
    return Mask(entries)


def _trial_seed(seed: int, ratio_idx: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, ratio_idx, trial]).generate_state(1)[0])


def _run_trial(panel, covariates, fns, config, ratio_idx, ratio, trial):
    seed = _trial_seed(config.seed, ratio_idx, trial)
    rng = np.random.default_rng(seed)
    n, t = panel.shape
    mask = placebo_assignment(n, t, ratio, config, rng)
    rows = []
    for name, fn in fns.items():
        Y_hat = fn(panel, mask, covariates, seed)
        rows.append((name, ratio, trial, rmse(panel.values, Y_hat, mask)))
    return rows


def run_placebo_suite(panel: PanelMatrix, config: PlaceboConfig = PlaceboConfig(),
                      covariates: Optional[CovariateSet] = None,
                      custom: Optional[Mapping[str, Callable]] = None, threads: int = 1) -> PlaceboReport:
    """RMSE of each estimator on hidden post blocks of pseudo-treated controls.

    ``panel`` must hold control units only. ``custom`` maps extra estimator
    names (listed in ``config.estimators``) to callables with the registry
    signature ``(panel, mask, covariates, seed) -> Y_hat``. Each (ratio, trial)
    pair has its own seed, so results do not depend on estimator order or on
    ``threads``.
    """
    if not panel.is_complete:
        raise PanelError("placebo panel must be fully observed")
    fns = _resolve(config.estimators, custom)
    tasks = [(ri, r, k) for ri, r in enumerate(config.t0_ratios) for k in range(config.n_trials)]
    run = lambda a: _run_trial(panel, covariates, fns, config, *a)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(a) for a in tasks]
    frame = pd.DataFrame([row for rows in results for row in rows], columns=["estimator", "ratio", "trial", "rmse"])
    frame = frame.sort_values(["estimator", "ratio", "trial"], kind="stable").reset_index(drop=True)
    return PlaceboReport(frame, config)


def backdate(panel: PanelMatrix, plan: TreatmentPlan, tau: int) -> tuple[PanelMatrix, TreatmentPlan]:
    """Truncate at the earliest adoption and move every adoption back by ``tau``.

    The returned panel keeps the first ``T0`` columns, where ``T0`` is the
    pooled (earliest) pre-period length; every treated unit then adopts after
    column ``T0 - tau``, so the tested window is the last ``tau`` periods.
    """
    pre = [panel.time_index(plan.adoption_time[u]) + 1 for u in plan.treated_units]
    pooled = min(pre)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if tau >= pooled:
        raise PanelError(f"tau={tau} leaves no pre-period (pooled pre-period length {pooled})")
    short = panel.select_periods(pooled)
    t_new = short.time_ids[pooled - tau - 1]
    return short, TreatmentPlan({u: t_new for u in plan.treated_units}, plan.unit_ids)


def backdating_test(panel: PanelMatrix, plan: TreatmentPlan, covariates: Optional[CovariateSet] = None,
                    taus: Iterable[int] = (1, 10, 25), qs: Iterable[float] = (1.0, 2.0),
                    schemes: Iterable[str] = SCHEMES, seed: int = 0, estimator: EstimatorLike = "MC-NNM",
                    n_permutations: int = 1000, refit: bool = False) -> pd.DataFrame:
    """p-values of the zero-effect null on backdated windows.

    ``estimator`` is a registry name or a callable with the registry
    signature. ``refit`` fits MC-NNM on every cell of the truncated panel
    (see :func:`panelcf.pipeline.fit_counterfactuals`). Returns a tidy frame
    with columns ``tau, q, scheme, s_observed, p_value``.
    """
    if isinstance(estimator, str):
        est.get(estimator)

        def fn(short, mask, cov, s, plan):
            return fit_counterfactuals(short, plan, cov, estimator, s, refit=refit)[0]
    else:
        if refit:
            raise ValueError("refit needs a named estimator")

        def fn(short, mask, cov, s, plan):
            return estimator(short, mask, cov, s)
    taus = sorted(int(t) for t in taus)
    qs = list(qs)
    schemes = list(schemes)
    rows = []
    for tau in taus:
        short, bplan = backdate(panel, plan, tau)
        mask = build_mask(bplan, *short.shape, short.time_ids)
        Y_hat = fn(short, mask, covariates, seed, bplan)
        effects = compute_effects(short, Y_hat, bplan)
        for res in randomization_tests(effects, qs, schemes, n_permutations, seed):
            for scheme in schemes:
                rows.append((tau, res.q, scheme, res.s_observed, res.p_values[scheme]))
    return pd.DataFrame(rows, columns=["tau", "q", "scheme", "s_observed", "p_value"])
