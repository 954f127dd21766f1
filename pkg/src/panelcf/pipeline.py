"""End-to-end sequence: fit -> effects -> S_q -> p-values -> bootstrap bands."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from . import estimators as est
from .inference import (
    SCHEMES,
    BootstrapBand,
    EffectSeries,
    TestResult,
    block_bootstrap_band,
    compute_effects,
    randomization_tests,
)
from .mcnnm import CVConfig, estimate_mcnnm
from .panel import CovariateSet, Mask, PanelMatrix, TreatmentPlan, build_mask


@dataclass
class PipelineResult:
    Y_hat: np.ndarray
    mask: Mask
    effects: EffectSeries
    tests: list
    band: Optional[BootstrapBand] = None


def fit_counterfactuals(panel: PanelMatrix, plan: TreatmentPlan, covariates: Optional[CovariateSet] = None,
                        estimator: str = "MC-NNM", seed: int = 0, threads: int = 1,
                        refit: bool = False) -> tuple[np.ndarray, Mask]:
    """Complete prediction matrix for a treatment plan.

    With ``refit`` the sharp null of no effect is imposed: treated post cells
    are treated as observed untreated outcomes and MC-NNM is fit on the whole
    panel, so pre- and post-period deviations are both in-sample residuals.
    Only MC-NNM supports ``refit``.
    """
    mask = build_mask(plan, *panel.shape, panel.time_ids)
    if refit:
        if estimator != "MC-NNM":
            raise ValueError("refit is only supported for the MC-NNM estimator")
        full = Mask(np.zeros(panel.shape, dtype=bool))
        # fold pre-lengths still follow the treated rows' adoption dates
        fit, _ = estimate_mcnnm(panel, full, covariates, CVConfig(seed=seed), threads=threads,
                                holdout_pre=mask.pre_lengths()[plan.treated_rows()])
        return fit.Y_hat, mask
    if estimator == "MC-NNM":
        fit, _ = estimate_mcnnm(panel, mask, covariates, CVConfig(seed=seed), threads=threads)
        return fit.Y_hat, mask
    return est.get(estimator)(panel, mask, covariates, seed), mask


def run_pipeline(panel: PanelMatrix, plan: TreatmentPlan, covariates: Optional[CovariateSet] = None,
                 estimator: str = "MC-NNM", qs: Iterable[float] = (1.0, 2.0), schemes: Iterable[str] = SCHEMES,
                 n_permutations: int = 1000, n_bootstrap: Optional[int] = 1000, seed: int = 0,
                 threads: int = 1, refit: bool = False, event_time: bool = False,
                 level: float = 0.95) -> PipelineResult:
    """Counterfactuals, per-period effects, randomization tests and bands.

    ``n_bootstrap=None`` skips the bootstrap band.
    """
    Y_hat, mask = fit_counterfactuals(panel, plan, covariates, estimator, seed, threads, refit)
    effects = compute_effects(panel, Y_hat, plan, event_time=event_time)
    tests = randomization_tests(effects, qs, schemes, n_permutations, seed)
    band = None
    if n_bootstrap:
        band = block_bootstrap_band(effects.alpha, n_bootstrap, level, seed)
    return PipelineResult(Y_hat, mask, effects, tests, band)


def counterfactual_frame(panel: PanelMatrix, Y_hat: np.ndarray, mask: Mask) -> pd.DataFrame:
    """Long frame of observed and predicted outcomes for every cell."""
    long = panel.to_long("observed")
    long["predicted"] = np.asarray(Y_hat).ravel()
    long["treated_post"] = mask.entries.ravel().astype(int)
    return long


def effects_frame(effects: EffectSeries, band: Optional[BootstrapBand] = None) -> pd.DataFrame:
    label = "event_time" if effects.mode == "event" else "time"
    df = pd.DataFrame({label: list(effects.time_ids), "alpha_bar": effects.alpha_bar})
    df["post"] = (np.arange(len(df)) >= effects.t0_index).astype(int)
    if band is not None:
        df["se"] = band.se
        df["ci_low"] = band.ci_low
        df["ci_high"] = band.ci_high
    return df


def tests_report(tests: list[TestResult]) -> list[dict]:
    return [t.to_report() for t in tests]
