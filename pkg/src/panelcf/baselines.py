"""Benchmark counterfactual estimators.

Every ``fit_*`` function takes a complete panel plus a :class:`Mask` and
returns a :class:`BaselineFit` whose ``Y_hat`` is a full N x T prediction
matrix. Control rows are always observed; for treated rows the model's
in-sample fit covers the pre-period and its forecast covers the masked cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .enet import EnetError, Standardized, elastic_net, penalty_grid
from .mcnnm import AdditiveEffects, CVConfig, _check_mask, holdout_masks
from .panel import CovariateSet, Mask, PanelError, PanelMatrix

logger = logging.getLogger(__name__)

METHODS = ("DID", "HR-EN", "VT-EN", "PCA", "SC-ADH", "SVD")


@dataclass
class BaselineFit:
    method: str
    Y_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# --- (a) two-way fixed effects -------------------------------------------------


def fit_did_binary(panel: PanelMatrix, mask: Mask) -> BaselineFit:
    """Two-way fixed effects with a treatment indicator.

    Unit and time effects are estimated on untreated cells; giving every
    treated cell its own indicator makes this the exact least-squares
    solution, and the reported ``tau`` is the average of those indicators.
    ``tau_pooled`` is the coefficient of a single common indicator.
    """
    mask.validate()
    observed = _check_mask(mask, panel.shape)
    Y = panel.values
    eff = AdditiveEffects(observed)
    if np.linalg.matrix_rank(eff.pinv) < sum(panel.shape) - 1:
        raise PanelError("two-way design is rank deficient on the observed cells")
    beta, gamma, delta = eff.fit(np.where(observed, Y, 0.0))
    Y_hat = eff.fitted(beta, gamma, delta)
    diag = {"unit_effects": gamma, "time_effects": delta}
    treated_cells = mask.entries & np.isfinite(Y)
    if treated_cells.any():
        diag["tau"] = float(np.mean(Y[treated_cells] - Y_hat[treated_cells]))
        diag["tau_pooled"] = _pooled_did(Y, mask.entries)
    return BaselineFit("DID", Y_hat, diag)


def _pooled_did(Y: np.ndarray, treated: np.ndarray) -> float:
    n, t = Y.shape
    ok = np.isfinite(Y)
    rows, cols = np.nonzero(ok)
    design = np.hstack([np.eye(n)[rows], np.eye(t)[cols][:, 1:], treated[rows, cols][:, None].astype(float)])
    coef = np.linalg.lstsq(design, Y[rows, cols], rcond=None)[0]
    return float(coef[-1])


# --- (b)/(f) elastic-net regressions --------------------------------------------


MIXES = (0.1, 0.5, 0.9)


def _select_penalty(train_sets, n_lambdas: int, min_ratio: float):
    """Pick (lam, mix) minimizing summed validation error.

    ``train_sets`` is a list of (X_train, Y_train, X_val, Y_val) where the
    targets may be vectors or matrices with one column per target. Ties go to
    the larger penalty.
    """
    stds = []
    for X, y, Xv, yv in train_sets:
        try:
            stds.append((Standardized.from_data(X, y), Xv, yv))
        except EnetError:
            pass
    if not stds:
        return np.inf, MIXES[-1]
    best = (np.inf, np.inf, MIXES[-1])
    for mix in MIXES:
        grid = penalty_grid(max(s.lambda_max(mix) for s, _, _ in stds), n_lambdas, min_ratio)
        err = np.zeros(grid.size)
        for s, Xv, yv in stds:
            for k, w in enumerate(s.solve_path(grid, mix, tol=1e-5, max_sweeps=2000)):
                b, coef = s.unscale(w if np.ndim(yv) == 2 else w[:, 0])
                err[k] += np.sum((yv - (b + Xv @ coef)) ** 2)
        for k, lam in enumerate(grid):
            if err[k] < best[0] * (1 - 1e-12) or (err[k] <= best[0] * (1 + 1e-12) and lam > best[1]):
                best = (err[k], lam, mix)
    return best[1], best[2]


def _vertical(Y, controls, row, pre, cv: CVConfig, penalty):
    X_all = Y[controls].T  # T x J
    X, y = X_all[:pre], Y[row, :pre]
    if pre < 1:
        raise PanelError("vertical regression needs at least one pre-period")
    if penalty is None:
        if pre < 2:
            raise PanelError("vertical regression cross-validation needs two pre-periods")
        n_val = max(1, int(round(0.2 * pre)))
        split = pre - n_val
        lam, mix = _select_penalty([(X[:split], y[:split], X[split:], y[split:])], cv.n_lambdas, 1e-3)
    else:
        lam, mix = penalty
    try:
        b, coef = elastic_net(X, y, lam, mix, tol=1e-12)
    except EnetError:
        # constant donors carry no information: intercept-only fit
        b, coef = float(np.mean(y)), np.zeros(X.shape[1])
    return b + X_all @ coef, {"intercept": b, "weights": coef, "lambda": lam, "mix": mix}


def _horizontal(Y, controls, rows, pre, cv: CVConfig, penalty):
    X = Y[controls, :pre]  # J x pre
    targets = Y[controls, pre:]
    J = len(controls)
    if J < 2:
        raise PanelError("horizontal regression needs at least two control units")
    if penalty is None:
        k = min(cv.n_folds, J)
        folds = np.array_split(np.random.default_rng(cv.seed).permutation(J), k)
        sets = []
        for fold in folds:
            tr = np.setdiff1d(np.arange(J), fold)
            sets.append((X[tr], targets[tr], X[fold], targets[fold]))
        lam, mix = _select_penalty(sets, cv.n_lambdas, 1e-3)
    else:
        lam, mix = penalty
    try:
        s = Standardized.from_data(X, targets)
    except EnetError:
        return np.broadcast_to(targets.mean(axis=0), (len(rows), targets.shape[1])).copy(), {"lambda": lam, "mix": mix}
    if np.isinf(lam):
        w = np.zeros((pre, targets.shape[1]))
    else:
        w = s.solve_path([lam], mix, tol=1e-12)[0]
    b, coef = s.unscale(w)
    out = b[None, :] + Y[rows, :pre] @ coef
    return out, {"lambda": lam, "mix": mix}


def fit_elastic_net(panel: PanelMatrix, mask: Mask, orientation: str = "vertical",
                    cv: CVConfig = CVConfig(), penalty: Optional[tuple[float, float]] = None) -> BaselineFit:
    """Elastic-net regression estimators.

    ``vertical``: each treated unit's pre-period series is regressed on the
    control units' contemporaneous series. ``horizontal``: each post-period
    column of the control rows is regressed on their pre-period columns and
    the fit is applied to treated rows sharing that adoption time.

    ``penalty=(lam, mix)`` fixes the penalty; otherwise it is chosen by
    trailing-block validation (vertical) or held-out control units
    (horizontal). ``lam=np.inf`` shrinks everything to the intercept.
    """
    mask.validate()
    _check_mask(mask, panel.shape)
    Y = panel.values
    n, t = Y.shape
    pre = mask.pre_lengths()
    controls = np.flatnonzero(pre == t)
    treated = np.flatnonzero(pre < t)
    Y_hat = Y.copy()
    diag = {"orientation": orientation, "units": {}}
    if orientation == "vertical":
        for i in treated:
            Y_hat[i], d = _vertical(Y, controls, i, pre[i], cv, penalty)
            diag["units"][panel.unit_ids[i]] = d
        method = "VT-EN"
    elif orientation == "horizontal":
        for k in np.unique(pre[treated]):
            rows = treated[pre[treated] == k]
            Y_hat[rows, k:], d = _horizontal(Y, controls, rows, int(k), cv, penalty)
            diag["units"].update({panel.unit_ids[i]: d for i in rows})
        method = "HR-EN"
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return BaselineFit(method, Y_hat, diag)


# --- (c)/(e) low-rank imputation ------------------------------------------------


def _initial_fill(Y, observed, init: str, seed: int):
    Z = np.where(observed, Y, 0.0)
    row_mean = Z.sum(axis=1) / observed.sum(axis=1)
    fill = np.broadcast_to(row_mean[:, None], Y.shape)
    if init == "random":
        sd = np.std(Y[observed])
        fill = fill + sd * np.random.default_rng(seed).standard_normal(Y.shape)
    elif init != "mean":
        raise ValueError(f"unknown init {init!r}")
    return np.where(observed, Y, fill)


def _truncated(Z, rank):
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    return (U[:, :rank] * s[:rank]) @ Vt[:rank], s


def fit_svd_em(panel: PanelMatrix, mask: Mask, rank: int = 2, max_iter: int = 1000, tol: float = 1e-6,
               init: str = "mean", seed: int = 0) -> BaselineFit:
    """Rank-``rank`` SVD imputation by expectation maximization.

    Missing cells start at the unit's observed mean (``init='random'`` adds
    noise), then alternate a truncated SVD of the completed matrix with
    refilling the missing cells, until the relative change of the completed
    matrix falls below ``tol``.
    """
    mask.validate()
    observed = _check_mask(mask, panel.shape)
    n, t = panel.shape
    if not 1 <= rank <= min(n, t):
        raise ValueError("rank must lie in [1, min(N, T)]")
    Y = panel.values
    Z = _initial_fill(Y, observed, init, seed)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R, _ = _truncated(Z, rank)
        Z_new = np.where(observed, Y, R)
        change = np.linalg.norm(Z_new - Z) / max(np.linalg.norm(Z), 1e-300)
        Z = Z_new
        if change < tol:
            converged = True
            break
    R, s = _truncated(Z, rank)
    if not converged:
        logger.info("SVD-EM did not converge in %d iterations", max_iter)
    return BaselineFit("SVD", R, {"rank": rank, "n_iter": it, "converged": converged,
                                  "singular_values": s[:rank]})


def fit_pca_iterative(panel: PanelMatrix, mask: Mask, rank: int = 2, max_iter: int = 1000, tol: float = 1e-6,
                      ridge: Optional[float] = None) -> BaselineFit:
    """Regularized iterative PCA.

    Each iteration centers the completed matrix by column means, takes the
    leading ``rank`` loadings, re-estimates every unit's scores by ridge
    regression on its observed cells, and refills the missing cells from the
    reconstruction. ``ridge`` defaults to 1e-4 times the mean column variance.
    """
    mask.validate()
    observed = _check_mask(mask, panel.shape)
    n, t = panel.shape
    if not 1 <= rank <= min(n, t):
        raise ValueError("rank must lie in [1, min(N, T)]")
    Y = panel.values
    Z = _initial_fill(Y, observed, "mean", 0)
    if ridge is None:
        ridge = 1e-4 * float(np.mean(np.var(np.where(observed, Y, np.nan), axis=0, where=observed)))
    eye = np.eye(rank)
    obs = observed.astype(float)
    Yz = np.where(observed, Y, 0.0)
    converged = False
    recon = Z
    it = 0
    for it in range(1, max_iter + 1):
        mu = Z.mean(axis=0)
        _, s, Vt = np.linalg.svd(Z - mu, full_matrices=False)
        W = Vt[:rank].T * s[:rank]  # T x rank loadings
        # per-unit ridge regressions on observed cells, solved as one batch
        gram = np.einsum("it,tr,ts->irs", obs, W, W) + ridge * eye
        rhs = (obs * (Yz - mu)) @ W
        try:
            scores = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # zero loadings (constant data) or ridge=0 with a degenerate unit
            scores = (np.linalg.pinv(gram) @ rhs[..., None])[..., 0]
        recon_new = mu + scores @ W.T
        change = np.linalg.norm(recon_new - recon) / max(np.linalg.norm(recon), 1e-300)
        recon = recon_new
        Z = np.where(observed, Y, recon)
        if change < tol:
            converged = True
            break
    if not converged:
        logger.info("iterative PCA did not converge in %d iterations", max_iter)
    return BaselineFit("PCA", recon, {"rank": rank, "ridge": ridge, "n_iter": it, "converged": converged})


def select_rank(panel: PanelMatrix, mask: Mask, fitter, ranks: Sequence[int], cv: CVConfig = CVConfig(),
                **kw) -> tuple[int, np.ndarray]:
    """Choose a rank by trailing-block holdout on control rows (same folds as MC-NNM)."""
    folds = holdout_masks(mask, cv.n_folds, cv.seed)
    errs = np.zeros(len(ranks))
    Y = panel.values
    for m, held in folds:
        for k, r in enumerate(ranks):
            fit = fitter(panel, m, rank=r, **kw)
            errs[k] += np.mean((Y[held] - fit.Y_hat[held]) ** 2)
    errs /= len(folds)
    return int(ranks[int(np.argmin(errs))]), errs


# --- (d) synthetic control ------------------------------------------------------


def _kl(p, q):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def _polish(ys, Xs, w, f):
    """Equality-constrained least squares on the support of ``w``.

    Exponentiated gradient approaches zero weights only sublinearly; solving
    the KKT system on the detected support finishes the job when the result
    stays on the simplex and lowers the objective.
    """
    support = w > 1e-8 * w.max()
    k = int(support.sum())
    A = Xs[:, support]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2.0 * A.T @ A
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([2.0 * A.T @ ys, [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    if np.any(sol < 0) or not np.all(np.isfinite(sol)):
        return w
    cand = np.zeros_like(w)
    cand[support] = sol
    cand /= cand.sum()
    return cand if f(cand) < f(w) else w


def simplex_weights(y: np.ndarray, X: np.ndarray, step_size: float = 0.05, max_iter: int = 5000,
                    tol: float = 1e-10, line_search: bool = True, polish: bool = True) -> dict:
    """Minimize mean((y - X w)^2) over the probability simplex by exponentiated gradient.

    ``X`` has one column per donor. Data are rescaled by their pooled standard
    deviation so the step size is unit-free. With ``line_search`` the step is
    halved until a Bregman sufficient-decrease condition holds and doubled
    after every accepted step; without it a fixed step is used and an
    objective increase is reported as divergence. Weights are carried in log
    space so large steps cannot underflow them to zero.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    m, J = X.shape
    scale = np.std(np.concatenate([y, X.ravel()])) or 1.0
    ys, Xs = y / scale, X / scale

    def f(w):
        r = ys - Xs @ w
        return float(r @ r / m)

    def grad(w):
        return -2.0 / m * (Xs.T @ (ys - Xs @ w))

    def normalize(lw):
        w = np.exp(lw - lw.max())
        return w / w.sum()

    logw = np.zeros(J)
    w = normalize(logw)
    obj = f(w)
    trace = [obj]
    max_dev = abs(w.sum() - 1.0)
    eta = step_size
    diverged = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(w)
        while True:
            logw_new = logw - eta * g
            logw_new -= logw_new.max()
            w_new = normalize(logw_new)
            new = f(w_new)
            if not line_search:
                break
            bound = obj + g @ (w_new - w) + _kl(w_new, w) / eta
            if new <= bound + 1e-15 * max(1.0, abs(obj)) or eta < 1e-12:
                break
            eta /= 2.0
        max_dev = max(max_dev, abs(w_new.sum() - 1.0))
        if not line_search and new > obj:
            diverged = True
        trace.append(new)
        change = obj - new
        w, obj, logw = w_new, new, logw_new
        if line_search:
            eta = min(eta * 2.0, 1e8)
        if abs(change) <= tol * obj or obj <= 1e-24:
            converged = True
            break
    if polish and not diverged:
        w_pol = _polish(ys, Xs, w, f)
        if w_pol is not w:
            w, obj = w_pol, f(w_pol)
            max_dev = max(max_dev, abs(w.sum() - 1.0))
            trace.append(obj)
    return {"weights": w, "objective_trace": trace, "n_iter": it, "converged": converged,
            "diverged": diverged, "max_simplex_deviation": max_dev, "scale": scale}


def fit_synth_control(panel: PanelMatrix, mask: Mask, covariates: Optional[CovariateSet] = None,
                      step_size: float = 0.05, max_iter: int = 5000, tol: float = 1e-10,
                      use_covariates: bool = False, line_search: bool = True) -> BaselineFit:
    """Synthetic control: simplex-weighted donor combination per treated unit.

    Matching variables are the treated unit's pre-period outcomes, optionally
    followed by its normalized unit covariates (one extra row each).
    """
    mask.validate()
    _check_mask(mask, panel.shape)
    Y = panel.values
    n, t = Y.shape
    pre = mask.pre_lengths()
    controls = np.flatnonzero(pre == t)
    if controls.size < 2:
        raise PanelError("synthetic control needs at least two control units")
    Y_hat = Y.copy()
    diag = {"units": {}}
    x = None
    if use_covariates and covariates is not None and covariates.n_covariates:
        x = covariates.unit_covariates
    for i in np.flatnonzero(pre < t):
        k = pre[i]
        target = Y[i, :k]
        donors = Y[controls, :k].T
        if x is not None:
            target = np.concatenate([target, x[i]])
            donors = np.vstack([donors, x[controls].T])
        res = simplex_weights(target, donors, step_size, max_iter, tol, line_search)
        if res["diverged"]:
            logger.warning("exponentiated gradient diverged for unit %r", panel.unit_ids[i])
        Y_hat[i] = res["weights"] @ Y[controls]
        diag["units"][panel.unit_ids[i]] = res
    diag["donors"] = [panel.unit_ids[j] for j in controls]
    return BaselineFit("SC-ADH", Y_hat, diag)


# --- continuous-intensity DID ---------------------------------------------------


@dataclass
class DIDContinuousFit:
    phi_hat: float
    psi_hat: float
    covariate_coefs: np.ndarray
    unit_effects: np.ndarray
    time_effects: np.ndarray
    ci_low: float
    ci_high: float
    n_obs: int
    adj_r2: float
    se: float = float("nan")
    n_bootstrap: int = 0
    ci_method: str = "percentile"
    bootstrap_draws: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_report(self) -> dict:
        return {
            "phi": self.phi_hat,
            "psi": self.psi_hat,
            "covariate_coefs": [float(c) for c in self.covariate_coefs],
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "se": self.se,
            "ci_method": self.ci_method,
            "n_bootstrap": self.n_bootstrap,
            "n_obs": self.n_obs,
            "adj_r2": self.adj_r2,
        }


def _demean2(A: np.ndarray) -> np.ndarray:
    return A - A.mean(axis=1, keepdims=True) - A.mean(axis=0, keepdims=True) + A.mean()


def _did_regression(Y, M, H, Xut):
    """Within-transformed least squares; returns (coef, ssr)."""
    cols = [M, M * H] + ([Xut[:, :, r] for r in range(Xut.shape[2])] if Xut is not None else [])
    D = np.column_stack([_demean2(c).ravel() for c in cols])
    y = _demean2(Y).ravel()
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise PanelError("continuous DID design is collinear (e.g. intensity constant on treated cells)")
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    return coef, float(resid @ resid)


def fit_did_continuous(panel: PanelMatrix, mask: Mask, intensity: np.ndarray,
                       covariates: Optional[CovariateSet] = None, n_bootstrap: int = 1000, seed: int = 0,
                       level: float = 0.95, ci_method: str = "percentile") -> DIDContinuousFit:
    """Continuous-treatment DID: Y ~ unit + time + psi*M + phi*M*H + X.

    Confidence intervals come from a bootstrap that resamples whole units with
    replacement, separately among treated and control units. ``ci_method``
    is ``percentile`` or ``normal`` (estimate +/- z * bootstrap SE).
    """
    Y = panel.values
    if not panel.is_complete:
        raise PanelError("continuous DID needs a complete panel")
    mask.validate()
    M = mask.entries.astype(float)
    H = np.asarray(intensity, dtype=float)
    if H.shape != Y.shape:
        raise PanelError("intensity must be N x T")
    if np.any(~np.isfinite(H[mask.entries])):
        raise PanelError("intensity missing on treated post-period cells")
    H = np.where(mask.entries, H, 0.0)
    Xut = None if covariates is None else covariates.unit_time_covariates
    n, t = Y.shape
    coef, ssr = _did_regression(Y, M, H, Xut)

    # effects recovered from the within residual structure
    Z = Y - coef[0] * M - coef[1] * H * M
    if Xut is not None:
        Z = Z - np.tensordot(Xut, coef[2:], axes=([2], [0]))
    mu = Z.mean()
    gamma = Z.mean(axis=1) - mu
    delta = Z.mean(axis=0)

    n_obs = n * t
    k = (n - 1) + (t - 1) + 1 + len(coef)
    sst = float(np.sum((Y - Y.mean()) ** 2))
    adj_r2 = 1.0 - (ssr / (n_obs - k)) / (sst / (n_obs - 1)) if sst > 0 and n_obs > k else float("nan")

    treated = np.flatnonzero(mask.entries.any(axis=1))
    controls = np.flatnonzero(~mask.entries.any(axis=1))
    rng = np.random.default_rng(seed)
    draws = []
    skipped = 0
    for _ in range(n_bootstrap):
        idx = np.concatenate([rng.choice(treated, treated.size), rng.choice(controls, controls.size)])
        try:
            c, _ = _did_regression(Y[idx], M[idx], H[idx], None if Xut is None else Xut[idx])
        except PanelError:
            skipped += 1
            continue
        draws.append(c[1])
    if skipped:
        logger.warning("%d bootstrap replicates were collinear and skipped", skipped)
    draws = np.asarray(draws)
    phi = float(coef[1])
    alpha = 1.0 - level
    if draws.size:
        se = float(np.std(draws, ddof=1)) if draws.size > 1 else 0.0
        if ci_method == "percentile":
            lo, hi = np.quantile(draws, [alpha / 2, 1 - alpha / 2])
            # a skewed bootstrap can leave the point estimate outside; widen to cover it
            lo, hi = min(lo, phi), max(hi, phi)
        elif ci_method == "normal":
            z = stats.norm.ppf(1 - alpha / 2)
            lo, hi = phi - z * se, phi + z * se
        else:
            raise ValueError(f"unknown ci_method {ci_method!r}")
    else:
        se, lo, hi = float("nan"), float("nan"), float("nan")
    return DIDContinuousFit(
        phi_hat=phi,
        psi_hat=float(coef[0]),
        covariate_coefs=coef[2:],
        unit_effects=gamma,
        time_effects=delta,
        ci_low=float(lo),
        ci_high=float(hi),
        n_obs=n_obs,
        adj_r2=float(adj_r2),
        se=se,
        n_bootstrap=int(draws.size),
        ci_method=ci_method,
        bootstrap_draws=draws,
    )
