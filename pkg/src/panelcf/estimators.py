"""Name -> estimator registry with a uniform call signature.

Each entry maps ``(panel, mask, covariates, seed)`` to a complete N x T
prediction matrix. The seed only drives cross-validation fold assignment.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .baselines import (
    fit_did_binary,
    fit_elastic_net,
    fit_pca_iterative,
    fit_svd_em,
    fit_synth_control,
    select_rank,
)
from .mcnnm import CVConfig, estimate_mcnnm
from .panel import CovariateSet, Mask, PanelMatrix

Estimator = Callable[[PanelMatrix, Mask, Optional[CovariateSet], int], np.ndarray]

MAX_RANK = 5


def _ranks(panel: PanelMatrix) -> list[int]:
    return list(range(1, min(MAX_RANK, min(panel.shape) - 1) + 1))


def mcnnm(panel, mask, covariates=None, seed=0, cv: Optional[CVConfig] = None):
    cv = cv or CVConfig(seed=seed)
    fit, _ = estimate_mcnnm(panel, mask, covariates, cv)
    return fit.Y_hat


def did(panel, mask, covariates=None, seed=0):
    return fit_did_binary(panel, mask).Y_hat


def hr_en(panel, mask, covariates=None, seed=0):
    return fit_elastic_net(panel, mask, "horizontal", CVConfig(seed=seed)).Y_hat


def vt_en(panel, mask, covariates=None, seed=0):
    return fit_elastic_net(panel, mask, "vertical", CVConfig(seed=seed)).Y_hat


def pca(panel, mask, covariates=None, seed=0):
    rank, _ = select_rank(panel, mask, fit_pca_iterative, _ranks(panel), CVConfig(seed=seed))
    return fit_pca_iterative(panel, mask, rank).Y_hat


def sc_adh(panel, mask, covariates=None, seed=0):
    return fit_synth_control(panel, mask, covariates).Y_hat


def svd(panel, mask, covariates=None, seed=0):
    rank, _ = select_rank(panel, mask, fit_svd_em, _ranks(panel), CVConfig(seed=seed))
    return fit_svd_em(panel, mask, rank).Y_hat


ESTIMATORS: dict[str, Estimator] = {
    "MC-NNM": mcnnm,
    "DID": did,
    "HR-EN": hr_en,
    "VT-EN": vt_en,
    "PCA": pca,
    "SC-ADH": sc_adh,
    "SVD": svd,
}


def get(name: str) -> Estimator:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ValueError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None
