"""Elastic-net regression by cyclic coordinate descent.

Penalized least squares in the glmnet parameterization,

    (1/2n) ||y - b - X w||^2 + lam * (mix * ||w||_1 + (1 - mix)/2 * ||w||^2),

on standardized predictors, with covariance (Gram) updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def _cd(gram, xty, w, lam, mix, tol, max_sweeps):
    p = w.shape[0]
    l1 = lam * mix
    denom = 1.0 + lam * (1.0 - mix)
    grad = xty - gram @ w
    n_sweeps = 0
    for n_sweeps in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            if gram[j, j] == 0.0:
                continue
            rho = grad[j] + gram[j, j] * w[j]
            if rho > l1:
                new = (rho - l1) / (gram[j, j] * denom)
            elif rho < -l1:
                new = (rho + l1) / (gram[j, j] * denom)
            else:
                new = 0.0
            delta = new - w[j]
            if delta != 0.0:
                for k in range(p):
                    grad[k] -= gram[k, j] * delta
                w[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            break
    return w, n_sweeps


@njit(cache=True)
def _cd_path(gram, xty_t, lambdas, mix, tol, max_sweeps):
    # xty_t is m x p (one row per target); returns n_lambda x m x p
    m, p = xty_t.shape
    out = np.zeros((lambdas.shape[0], m, p))
    for c in range(m):
        w = np.zeros(p)
        for k in range(lambdas.shape[0]):
            w, _ = _cd(gram, xty_t[c], w, lambdas[k], mix, tol, max_sweeps)
            out[k, c] = w
    return out


class EnetError(ValueError):
    pass


@dataclass
class Standardized:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    gram: np.ndarray
    xty: np.ndarray
    active: np.ndarray

    @classmethod
    def from_data(cls, X: np.ndarray, y: np.ndarray) -> "Standardized":
        """``y`` may be a vector or an n x m matrix of targets sharing ``X``."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n = X.shape[0]
        if n < 1:
            raise EnetError("elastic net needs at least one observation")
        x_mean = X.mean(axis=0)
        x_scale = X.std(axis=0)
        active = x_scale > 1e-12 * np.maximum(1.0, np.abs(x_mean))
        if not active.any():
            raise EnetError("all predictors are constant")
        scale = np.where(active, x_scale, 1.0)
        Z = (X - x_mean) / scale
        Z[:, ~active] = 0.0
        y_mean = y.mean(axis=0)
        y_mean = float(y_mean) if y.ndim == 1 else y_mean
        return cls(x_mean, scale, y_mean, Z.T @ Z / n, Z.T @ (y - y_mean) / n, active)

    def lambda_max(self, mix: float) -> float:
        return float(np.max(np.abs(self.xty)) / max(mix, 1e-3))

    def solve(self, lam: float, mix: float, w0=None, tol: float = 1e-10, max_sweeps: int = 100_000) -> np.ndarray:
        w = np.zeros(self.xty.shape[0]) if w0 is None else np.array(w0, dtype=float)
        w, _ = _cd(self.gram, self.xty, w, float(lam), float(mix), tol, max_sweeps)
        return w

    def solve_path(self, lambdas, mix: float, tol: float = 1e-8, max_sweeps: int = 100_000) -> np.ndarray:
        """Warm-started path for every target: array of shape (n_lambda, p, m)."""
        xty = np.atleast_2d(self.xty.T) if self.xty.ndim == 2 else self.xty[None, :]
        out = _cd_path(self.gram, np.ascontiguousarray(xty), np.asarray(lambdas, dtype=float),
                       float(mix), tol, max_sweeps)
        return out.transpose(0, 2, 1)

    def unscale(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        scale = self.x_scale if w.ndim == 1 else self.x_scale[:, None]
        active = self.active if w.ndim == 1 else self.active[:, None]
        coef = np.where(active, w / scale, 0.0)
        b = self.y_mean - self.x_mean @ coef
        return (float(b) if w.ndim == 1 else b), coef


def elastic_net(X, y, lam: float, mix: float = 0.5, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Fit one penalty level; returns (intercept, coefficients) on the original scale."""
    if np.isinf(lam):
        s = Standardized.from_data(X, y)
        return s.y_mean, np.zeros(np.asarray(X).shape[1])
    s = Standardized.from_data(X, y)
    return s.unscale(s.solve(lam, mix, tol=tol, max_sweeps=max_sweeps))


def elastic_net_path(X, y, mix: float, lambdas, tol: float = 1e-8) -> list[tuple[float, np.ndarray]]:
    """Warm-started fits over a decreasing sequence of penalties."""
    s = Standardized.from_data(X, y)
    w = None
    out = []
    for lam in lambdas:
        w = s.solve(lam, mix, w, tol=tol)
        out.append(s.unscale(w))
    return out


def penalty_grid(lam_max: float, n: int = 20, min_ratio: float = 1e-3) -> np.ndarray:
    if lam_max <= 0:
        return np.array([0.0])
    return np.geomspace(lam_max, lam_max * min_ratio, n)
