"""Counterfactual prediction for panel data by nuclear-norm matrix completion.

Includes benchmark estimators, randomization inference on per-period
effects, placebo protocols and a command-line pipeline.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.1.0"

from .panel import CovariateSet, Mask, PanelError, PanelMatrix, TreatmentPlan, build_mask  # noqa: E402
from .mcnnm import CVConfig, estimate_mcnnm, fit_mcnnm  # noqa: E402

__all__ = [
    "CVConfig",
    "CovariateSet",
    "Mask",
    "PanelError",
    "PanelMatrix",
    "TreatmentPlan",
    "build_mask",
    "estimate_mcnnm",
    "fit_mcnnm",
    "__version__",
]
