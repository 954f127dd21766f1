"""Matrix completion with nuclear-norm regularization (MC-NNM).

Model: Y = L + X beta + gamma 1' + 1 delta' + eps, fit on observed cells by
minimizing

    (1/|O|) * sum_O (Y - L - X beta - gamma_i - delta_t)^2 + lam * ||L||_*

with block alternation: exact least squares for the additive effects given L,
then one soft-impute (proximal gradient) step for L given the effects.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .panel import CovariateSet, Mask, PanelError, PanelMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CVConfig:
    """Cross-validation settings; ``lambda_grid=None`` means an automatic log-spaced path."""

    lambda_grid: Optional[Sequence[float]] = None
    n_lambdas: int = 20
    min_ratio: float = 1e-4
    n_folds: int = 5
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float)
            if grid.size == 0:
                raise ValueError("lambda_grid must be nonempty")
            if np.any(grid < 0):
                raise ValueError("lambda_grid values must be nonnegative")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class MCNNMFit:
    L_hat: np.ndarray
    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    delta_hat: np.ndarray
    lam: float
    rank: int
    residuals: np.ndarray
    Y_hat: np.ndarray
    covariates: np.ndarray
    unit_ids: tuple = ()
    time_ids: tuple = ()
    n_iter: int = 0
    converged: bool = True
    objective_trace: list = field(default_factory=list)
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def recompose(self) -> np.ndarray:
        return (
            self.L_hat
            + (self.covariates @ self.beta_hat)[:, None]
            + self.gamma_hat[:, None]
            + self.delta_hat[None, :]
        )

    def to_report(self) -> dict:
        return {
            "lambda": float(self.lam),
            "rank": int(self.rank),
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
            "objective_trace": [float(v) for v in self.objective_trace],
            "nuclear_norm": float(np.sum(self.singular_values)),
            "beta": [float(b) for b in self.beta_hat],
        }


def soft_threshold_svd(Z: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Replace singular values s of Z by max(s - threshold, 0); returns (matrix, shrunk values)."""
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    s = np.maximum(s - threshold, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep], s


class AdditiveEffects:
    """Least-squares fit of unit/time effects (and covariates) on observed cells.

    The design only depends on the observation pattern, so its pseudo-inverse
    is computed once and reused across solver iterations.
    """

    def __init__(self, observed: np.ndarray, covariates: Optional[np.ndarray] = None,
                 unit_effects: bool = True, time_effects: bool = True):
        self.observed = observed
        n, t = observed.shape
        self.n, self.t = n, t
        self.unit_effects = unit_effects
        self.time_effects = time_effects
        x = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
        self.x = x
        rows, cols = np.nonzero(observed)
        self.rows, self.cols = rows, cols
        blocks = []
        if unit_effects:
            blocks.append(np.eye(n)[rows])
        if time_effects:
            blocks.append(np.eye(t)[cols])
        # covariates are only identified without unit effects
        if x.shape[1] and not unit_effects:
            blocks.append(x[rows])
        if blocks:
            design = np.hstack(blocks)
            self.pinv = np.linalg.pinv(design)
        else:
            self.pinv = None

    def fit(self, R: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (beta, gamma, delta) minimizing squared error of R on observed cells."""
        n, t, p = self.n, self.t, self.x.shape[1]
        gamma, delta, beta = np.zeros(n), np.zeros(t), np.zeros(p)
        if self.pinv is None:
            return beta, gamma, delta
        coef = self.pinv @ R[self.rows, self.cols]
        k = 0
        if self.unit_effects:
            gamma = coef[:n].copy()
            k = n
        if self.time_effects:
            delta = coef[k:k + t].copy()
            k += t
        if p and not self.unit_effects:
            beta = coef[k:k + p].copy()
        if self.unit_effects and self.time_effects:
            shift = gamma.mean()
            gamma -= shift
            delta += shift
        if p and self.unit_effects:
            # split the unit effect into a covariate-explained part and a remainder
            beta = np.linalg.lstsq(self.x, gamma, rcond=None)[0]
            gamma = gamma - self.x @ beta
        return beta, gamma, delta

    def fitted(self, beta, gamma, delta) -> np.ndarray:
        return (self.x @ beta)[:, None] + gamma[:, None] + delta[None, :]


def _check_mask(mask: Mask, shape) -> np.ndarray:
    if mask.shape != tuple(shape):
        raise PanelError("mask shape does not match the panel")
    observed = mask.observed
    if not observed.any(axis=1).all():
        raise PanelError("a unit has no observed entries")
    if not observed.any(axis=0).all():
        raise PanelError("a period has no observed entries")
    return observed


def objective(Y, L, effects_fitted, observed, lam) -> float:
    r = (Y - L - effects_fitted)[observed]
    nuc = np.linalg.svd(L, compute_uv=False).sum()
    return float(np.mean(r ** 2) + lam * nuc)


def lambda_max(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
               unit_effects: bool = True, time_effects: bool = True) -> float:
    """Smallest lambda at which L = 0 is the solution."""
    observed = _check_mask(mask, panel.shape)
    x = None if covariates is None else covariates.unit_covariates
    eff = AdditiveEffects(observed, x, unit_effects, time_effects)
    Y = np.where(observed, panel.values, 0.0)
    fitted = eff.fitted(*eff.fit(Y))
    R = np.where(observed, Y - fitted, 0.0)
    s1 = np.linalg.norm(R, 2)
    return float(2.0 * s1 / observed.sum())


def lambda_grid(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
                n_lambdas: int = 20, min_ratio: float = 1e-4, **kw) -> np.ndarray:
    lmax = lambda_max(panel, mask, covariates, **kw)
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(lmax, lmax * min_ratio, n_lambdas)


def fit_mcnnm(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
              lam: float = 0.0, max_iter: int = 500, tol: float = 1e-6,
              unit_effects: bool = True, time_effects: bool = True, accelerate: bool = True,
              L_init: Optional[np.ndarray] = None, _effects: Optional[AdditiveEffects] = None) -> MCNNMFit:
    """Fit MC-NNM at a fixed regularization level ``lam``.

    Each iteration refits the additive effects on ``Y - L`` by least squares and
    takes one soft-impute step: missing residual cells are filled with the
    current low-rank matrix and the result is soft-thresholded at
    ``lam * |O| / 2``. With ``accelerate`` the step starts from a momentum
    point; momentum is dropped whenever the objective would rise, so the
    objective trace is non-increasing either way.

    Stops when the relative objective change drops below ``tol``; hitting
    ``max_iter`` returns the fit with ``converged=False``.
    """
    mask.validate()
    observed = _check_mask(mask, panel.shape)
    Y = np.where(observed, panel.values, 0.0)
    if not np.all(np.isfinite(Y)):
        raise PanelError("observed outcomes must be finite")
    x = np.zeros((panel.shape[0], 0)) if covariates is None else covariates.unit_covariates
    if x.shape[0] != panel.shape[0]:
        x = np.zeros((panel.shape[0], 0))
    eff = _effects if _effects is not None else AdditiveEffects(observed, x, unit_effects, time_effects)
    n_obs = observed.sum()
    threshold = lam * n_obs / 2.0

    def profile(L):
        coefs = eff.fit(Y - L)
        fitted = eff.fitted(*coefs)
        return coefs, fitted, float(np.mean((Y - L - fitted)[observed] ** 2))

    L = np.zeros(panel.shape) if L_init is None else np.array(L_init, dtype=float)
    coefs, fitted, loss = profile(L)
    s = np.linalg.svd(L, compute_uv=False)
    obj = loss + lam * float(s.sum())
    trace = [obj]
    converged = False
    V, V_fitted, momentum = L, fitted, False
    t_k = 1.0
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        Z = np.where(observed, Y - V_fitted, V)
        L_new, s_new = soft_threshold_svd(Z, threshold)
        coefs_new, fitted_new, loss_new = profile(L_new)
        new = loss_new + lam * float(s_new.sum())
        if momentum and new > obj:
            V, V_fitted, momentum, t_k = L, fitted, False, 1.0
            continue
        change = abs(obj - new) / max(abs(obj), 1e-300)
        if accelerate:
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k)) / 2.0
            V = L_new + ((t_k - 1.0) / t_next) * (L_new - L)
            V_fitted = eff.fitted(*eff.fit(Y - V))
            momentum, t_k = True, t_next
        else:
            V, V_fitted = L_new, fitted_new
        L, s, coefs, fitted, obj = L_new, s_new, coefs_new, fitted_new, new
        trace.append(obj)
        if change < tol:
            converged = True
            break
    if not converged:
        logger.info("MC-NNM did not converge in %d iterations (lambda=%g)", max_iter, lam)

    beta, gamma, delta = coefs
    Y_hat = L + fitted
    residuals = np.where(observed, panel.values - Y_hat, np.nan)
    return MCNNMFit(
        L_hat=L,
        beta_hat=beta,
        gamma_hat=gamma,
        delta_hat=delta,
        lam=float(lam),
        rank=int(np.count_nonzero(s > 0)),
        residuals=residuals,
        Y_hat=Y_hat,
        covariates=x,
        unit_ids=panel.unit_ids,
        time_ids=panel.time_ids,
        n_iter=n_iter,
        converged=converged,
        objective_trace=trace,
        singular_values=s,
    )


def fit_path(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet], grid: Sequence[float],
             max_iter: int = 500, tol: float = 1e-6, **kw) -> list[MCNNMFit]:
    """Fits along a decreasing lambda grid with warm starts."""
    observed = _check_mask(mask, panel.shape)
    x = None if covariates is None else covariates.unit_covariates
    eff = AdditiveEffects(observed, x, kw.get("unit_effects", True), kw.get("time_effects", True))
    fits = []
    L = None
    for lam in grid:
        fit = fit_mcnnm(panel, mask, covariates, lam, max_iter, tol, L_init=L, _effects=eff, **kw)
        L = fit.L_hat
        fits.append(fit)
    return fits


@dataclass
class CVResult:
    lambda_star: float
    cv_curve: np.ndarray
    grid: np.ndarray
    fold_errors: np.ndarray
    degenerate: bool = False


def holdout_masks(mask: Mask, n_folds: int, seed: int,
                  holdout_pre: Optional[Sequence[int]] = None) -> list[tuple[Mask, np.ndarray]]:
    """Extra trailing-block masks on disjoint groups of control rows.

    Each held-out control row gets a pre-period length drawn from the treated
    rows' pre-period lengths (or from ``holdout_pre`` when given), mimicking
    the counterfactual block. Returns ``(training_mask, held_out_cells)`` per
    fold.
    """
    n, t = mask.shape
    pre = mask.pre_lengths()
    controls = np.flatnonzero(pre == t)
    treated_pre = pre[pre < t] if holdout_pre is None else np.asarray(holdout_pre, dtype=int)
    if treated_pre.size == 0:
        treated_pre = np.array([max(1, t // 2)])
    if controls.size < 2:
        raise PanelError("cross-validation needs at least two control units")
    k = min(n_folds, controls.size)
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])
    groups = np.array_split(rng.permutation(controls), k)
    fold_rngs = [np.random.default_rng(s) for s in ss.spawn(k)]
    out = []
    for group, frng in zip(groups, fold_rngs):
        held = np.zeros((n, t), dtype=bool)
        for row in group:
            held[row, int(frng.choice(treated_pre)):] = True
        out.append((Mask(mask.entries | held), held))
    return out


def _fold_errors(panel, covariates, grid, train_mask, held, max_iter, tol, kw) -> np.ndarray:
    fits = fit_path(panel, train_mask, covariates, grid, max_iter, tol, **kw)
    Y = panel.values
    return np.array([np.mean((Y[held] - f.Y_hat[held]) ** 2) for f in fits])


def cross_validate_lambda(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
                          config: CVConfig = CVConfig(), threads: int = 1,
                          holdout_pre: Optional[Sequence[int]] = None, **kw) -> CVResult:
    """Choose lambda by trailing-block holdout on control rows.

    The mean held-out squared error is minimized over the grid; ties go to the
    larger lambda.
    """
    if config.lambda_grid is not None:
        grid = np.sort(np.asarray(config.lambda_grid, dtype=float))[::-1]
    else:
        grid = lambda_grid(panel, mask, covariates, config.n_lambdas, config.min_ratio, **kw)
    folds = holdout_masks(mask, config.n_folds, config.seed, holdout_pre)
    tasks = [(panel, covariates, grid, m, h, config.max_iter, config.tol, kw) for m, h in folds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            errors = list(pool.map(lambda a: _fold_errors(*a), tasks))
    else:
        errors = [_fold_errors(*a) for a in tasks]
    errors = np.vstack(errors)
    curve = errors.mean(axis=0)
    best = curve.min()
    # grid is decreasing, so the first near-minimal entry is the largest lambda
    idx = int(np.flatnonzero(curve <= best * (1 + 1e-12) + 1e-300)[0])
    degenerate = bool(grid.size > 1 and np.ptp(curve) <= 1e-12 * max(abs(best), 1e-300))
    if degenerate:
        logger.warning("cross-validation curve is flat; returning the largest lambda")
        idx = 0
    return CVResult(float(grid[idx]), curve, grid, errors, degenerate)


def estimate_mcnnm(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
                   config: CVConfig = CVConfig(), threads: int = 1,
                   holdout_pre: Optional[Sequence[int]] = None, **kw) -> tuple[MCNNMFit, CVResult]:
    """Cross-validate lambda, then refit on the full observed set."""
    cv = cross_validate_lambda(panel, mask, covariates, config, threads, holdout_pre, **kw)
    grid = cv.grid[cv.grid >= cv.lambda_star]
    fit = fit_path(panel, mask, covariates, grid, config.max_iter, config.tol, **kw)[-1]
    return fit, cv


def predict_counterfactuals(fit: MCNNMFit, mask: Mask) -> dict:
    """Predictions at the mask's missing cells keyed by (unit, time)."""
    rows, cols = np.nonzero(mask.entries)
    units = fit.unit_ids or tuple(range(fit.Y_hat.shape[0]))
    times = fit.time_ids or tuple(range(1, fit.Y_hat.shape[1] + 1))
    return {(units[i], times[j]): float(fit.Y_hat[i, j]) for i, j in zip(rows, cols)}
