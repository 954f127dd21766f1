"""Effect series, randomization tests and block-bootstrap bands.

The test permutes the time index of the average-effect trajectory and
recomputes the statistic on the post-period window; p-values use a strict
inequality with no +1 correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .panel import PanelError, PanelMatrix, TreatmentPlan

SCHEMES = ("iid", "iid_block", "moving_block")


@dataclass
class EffectSeries:
    """Per-unit deviations ``alpha`` (Q x T) and their cross-unit mean.

    ``t0_index`` is the number of leading pre-period columns, so the tested
    window is ``alpha_bar[t0_index:]``.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray
    t0_index: int
    time_ids: tuple = ()
    unit_ids: tuple = ()
    mode: str = "calendar"

    @property
    def post_length(self) -> int:
        return len(self.alpha_bar) - self.t0_index

    @property
    def window(self) -> np.ndarray:
        return self.alpha_bar[self.t0_index:]


@dataclass
class TestResult:
    s_observed: float
    q: float
    p_values: dict
    n_permutations: dict
    block_length: Optional[int] = None
    null_stats: dict = field(default_factory=dict, repr=False)

    def to_report(self) -> dict:
        return {
            "q": self.q,
            "s_observed": self.s_observed,
            "p_values": dict(self.p_values),
            "n_permutations": dict(self.n_permutations),
            "block_length": self.block_length,
        }


@dataclass
class BootstrapBand:
    point: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_replicates: int
    block_length: int
    level: float = 0.95


def compute_effects(panel: PanelMatrix, Y_hat: np.ndarray, plan: TreatmentPlan,
                    pooled_t0: Optional[int] = None, event_time: bool = False) -> EffectSeries:
    """Observed minus predicted outcomes for treated units over all periods.

    Calendar mode averages across treated units period by period and tests
    the window after ``pooled_t0`` (default: earliest adoption). Event-time
    mode aligns units on their own adoption dates, keeping the event window
    that every treated unit covers. Deviations below ``1e-12`` times the
    largest treated outcome are set to zero.
    """
    rows = plan.treated_rows()
    if rows.size == 0:
        raise PanelError("no treated units")
    Y = panel.values
    Y_hat = np.asarray(Y_hat, dtype=float)
    if Y_hat.shape != Y.shape:
        raise PanelError("prediction matrix does not match the panel")
    alpha = Y[rows] - Y_hat[rows]
    # deviations at rounding level carry no information; snap them to zero so
    # an exact fit gives S = 0 instead of a statistic built from float noise
    scale = max(1.0, float(np.nanmax(np.abs(Y[rows]))))
    alpha[np.abs(alpha) <= 1e-12 * scale] = 0.0
    units = tuple(panel.unit_ids[i] for i in rows)
    pre = np.array([panel.time_index(plan.adoption_time[u]) + 1 for u in units])
    if not event_time:
        t0 = pre.min() if pooled_t0 is None else panel.time_index(pooled_t0) + 1
        return EffectSeries(alpha, alpha.mean(axis=0), int(t0), panel.time_ids, units, "calendar")
    t = Y.shape[1]
    lead = int(pre.min())
    lag = int((t - pre).min())
    aligned = np.vstack([alpha[k, pre[k] - lead:pre[k] + lag] for k in range(rows.size)])
    event = tuple(range(-lead + 1, lag + 1))
    return EffectSeries(aligned, aligned.mean(axis=0), lead, event, units, "event")


def s_stat(window, q: float) -> float:
    """((1/sqrt(T*)) * sum |a_t|^q)^q over the post-period window."""
    a = np.abs(np.asarray(window, dtype=float))
    if a.size < 1:
        raise ValueError("window must be nonempty")
    if q <= 0:
        raise ValueError("q must be positive")
    # exactly rounded sum: reorderings of the same window tie bit-for-bit
    return float((math.fsum(a ** q) / math.sqrt(a.size)) ** q)


def optimal_block_length(series) -> int:
    """Automatic block length for the circular block bootstrap.

    Flat-top lag-window estimates of the long-run variance and its first
    moment, with the bandwidth set at twice the first lag after which
    ``K_N`` consecutive autocorrelations are insignificant. Result is rounded
    and clamped to ``[1, ceil(T/3)]``.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError("optimal_block_length needs at least 10 observations")
    e = x - x.mean()
    var = e @ e / n
    if var <= 1e-14 * max(1.0, float(np.mean(x * x))):
        return 1
    kn = max(5, int(math.ceil(math.sqrt(math.log10(n)))))
    m_max = int(math.ceil(math.sqrt(n))) + kn
    lags = min(m_max + kn, n - 1)
    acov = np.array([e[k:] @ e[:n - k] / n for k in range(lags + 1)])
    rho = acov / acov[0]
    crit = 2.0 * math.sqrt(math.log10(n) / n)
    m_hat = None
    for m in range(1, lags - kn + 2):
        if np.all(np.abs(rho[m:m + kn]) < crit):
            m_hat = m
            break
    if m_hat is None:
        m_hat = m_max
    big_m = min(max(2 * m_hat, 1), m_max, lags)
    k = np.arange(1, big_m + 1)
    kernel = np.minimum(1.0, 2.0 * (1.0 - k / big_m))
    g = 2.0 * np.sum(kernel * k * acov[k])
    lrv = acov[0] + 2.0 * np.sum(kernel * acov[k])
    d_cb = 4.0 / 3.0 * lrv ** 2
    if d_cb <= 0 or g == 0:
        return 1
    b = (2.0 * g ** 2 / d_cb) ** (1.0 / 3.0) * n ** (1.0 / 3.0)
    return int(min(max(round(b), 1), math.ceil(n / 3)))


def _permutations(scheme: str, T: int, n_permutations: int, rng: np.random.Generator,
                  block_length: Optional[int]):
    if scheme == "moving_block":
        for k in range(1, T):
            yield np.roll(np.arange(T), k)
    elif scheme == "iid":
        for _ in range(n_permutations):
            yield rng.permutation(T)
    elif scheme == "iid_block":
        b = block_length
        starts = np.arange(0, T, b)
        blocks = [np.arange(s, min(s + b, T)) for s in starts]
        for _ in range(n_permutations):
            order = rng.permutation(len(blocks))
            yield np.concatenate([blocks[j] for j in order])
    else:
        raise ValueError(f"unknown scheme {scheme!r}")


def permutation_test(effects: EffectSeries, scheme: str = "iid", n_permutations: int = 1000, q: float = 1.0,
                     seed: int = 0, null: Optional[Sequence[float]] = None,
                     block_length: Optional[int] = None) -> TestResult:
    """Randomization p-value for the sharp null on the post-period window.

    ``p = 1 - mean(S(permuted) < S(observed))``. ``null`` is an optional null
    trajectory subtracted from the post window before testing. ``moving_block``
    always uses the T-1 circular shifts and ignores ``n_permutations``.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    traj = np.array(effects.alpha_bar, dtype=float)
    t0 = effects.t0_index
    T = traj.size
    if not 0 <= t0 < T:
        raise PanelError("post window is empty")
    if null is not None:
        null = np.asarray(null, dtype=float)
        if null.size != T - t0:
            raise ValueError("null trajectory must match the post window length")
        traj[t0:] -= null
    b = None
    if scheme == "iid_block":
        b = optimal_block_length(traj) if block_length is None else int(block_length)
        if b > T:
            raise ValueError("block length exceeds the series length")
        if b < 1:
            raise ValueError("block length must be >= 1")
    s_obs = s_stat(traj[t0:], q)
    rng = np.random.default_rng(seed)
    null_stats = np.array([s_stat(traj[perm][t0:], q) for perm in _permutations(scheme, T, n_permutations, rng, b)])
    p = 1.0 - float(np.mean(null_stats < s_obs))
    return TestResult(s_obs, q, {scheme: p}, {scheme: int(null_stats.size)}, b, {scheme: null_stats})


def randomization_tests(effects: EffectSeries, qs: Iterable[float] = (1.0, 2.0), schemes: Iterable[str] = SCHEMES,
                        n_permutations: int = 1000, seed: int = 0, null=None) -> list[TestResult]:
    """One :class:`TestResult` per q, covering every scheme.

    Each (q, scheme) pair draws from its own child seed, so results do not
    depend on which other pairs are requested.
    """
    schemes = list(schemes)
    out = []
    for qi, q in enumerate(qs):
        merged = None
        for scheme in schemes:
            child = np.random.SeedSequence([seed, qi, SCHEMES.index(scheme)]).generate_state(1)[0]
            r = permutation_test(effects, scheme, n_permutations, q, int(child), null)
            if merged is None:
                merged = r
            else:
                merged.p_values.update(r.p_values)
                merged.n_permutations.update(r.n_permutations)
                merged.null_stats.update(r.null_stats)
                merged.block_length = merged.block_length or r.block_length
        out.append(merged)
    return out


def circular_block_indices(T: int, b: int, rng: np.random.Generator) -> np.ndarray:
    n_blocks = math.ceil(T / b)
    starts = rng.integers(0, T, n_blocks)
    idx = (starts[:, None] + np.arange(b)[None, :]) % T
    return idx.ravel()[:T]


def block_bootstrap_band(alpha, B: int = 1000, level: float = 0.95, seed: int = 0,
                         block_length: Optional[int] = None) -> BootstrapBand:
    """Per-period standard errors from a circular block bootstrap over time.

    Each replicate resamples the time index of the Q x T deviation matrix in
    wrapped blocks and averages across units; the band is point +/- z * SE.
    """
    if B < 100:
        raise ValueError("B must be >= 100")
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    point = alpha.mean(axis=0)
    T = point.size
    b = optimal_block_length(point) if block_length is None else int(block_length)
    rng = np.random.default_rng(seed)
    reps = np.empty((B, T))
    for r in range(B):
        reps[r] = alpha[:, circular_block_indices(T, b, rng)].mean(axis=0)
    se = reps.std(axis=0, ddof=1)
    z = stats.norm.ppf(0.5 + level / 2.0)
    return BootstrapBand(point, se, point - z * se, point + z * se, B, b, level)
