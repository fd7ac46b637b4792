"""Evaluation statistics: generalization RMSE, abnormal-return autocorrelation,
selection-overlap (Jaccard) coefficients and the cross-sectional
mispricing-correction regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UndefinedStatisticError

logger = logging.getLogger(__name__)


def generalization_rmse(realized: np.ndarray, predicted: np.ndarray) -> float:
    """Root mean squared error over every (test time, asset) pair."""
    realized = np.asarray(realized, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if realized.size == 0:
        raise UndefinedStatisticError("empty test schedule")
    if realized.shape != predicted.shape:
        raise ValueError(f"shape mismatch {realized.shape} vs {predicted.shape}")
    resid = realized - predicted
    return float(np.sqrt(np.mean(resid * resid)))


@dataclass(frozen=True, eq=False)
class AutocorrResult:
    lag: int
    values: np.ndarray  # per asset, NaN where undefined
    excluded: int

    def summary(self) -> dict[str, float]:
        """Box-plot quantiles across the assets with a defined value."""
        v = self.values[~np.isnan(self.values)]
        if len(v) == 0:
            raise UndefinedStatisticError(f"no asset has a defined lag-{self.lag} autocorrelation")
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        return {"n_assets": int(len(v)), "excluded": self.excluded, "min": float(q[0]),
                "q1": float(q[1]), "median": float(q[2]), "q3": float(q[3]), "max": float(q[4]),
                "mean": float(v.mean())}


def autocorrelation(x: np.ndarray, lag: int) -> float:
    """Lag-``lag`` sample autocorrelation, centred on the overall mean.

    Uses the lag-specific average ``sum((x_t - m)(x_{t+k} - m)) / (n - k)``
    over the variance ``sum((x_t - m)^2) / n``, so a perfectly alternating
    zero-mean series scores exactly -1 at lag 1.  NaN for a constant series.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if lag < 1 or n < lag + 2:
        raise UndefinedStatisticError(f"need at least {lag + 2} points for lag {lag}, got {n}")
    d = x - x.mean()
    c0 = np.dot(d, d) / n
    if c0 <= 0.0:
        return float("nan")
    ck = np.dot(d[:-lag], d[lag:]) / (n - lag)
    return float(ck / c0)


def abnormal_autocorr(history: np.ndarray, lag: int) -> AutocorrResult:
    """Per-asset autocorrelation of ``eps_dagger`` on the rebalance grid.

    ``history`` is ``T x N`` (rebalance times by assets); ``lag`` counts
    rebalance steps.  Zero-variance (or NaN-bearing) assets are excluded.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2:
        raise ValueError("history must be a T x N matrix")
    values = np.full(history.shape[1], np.nan)
    for i in range(history.shape[1]):
        col = history[:, i]
        if np.isnan(col).any():
            continue
        values[i] = autocorrelation(col, lag)
    excluded = int(np.isnan(values).sum())
    if excluded:
        logger.info("lag %d: %d assets excluded (constant or incomplete series)", lag, excluded)
    return AutocorrResult(lag, values, excluded)


@dataclass(frozen=True)
class SelectionHistory:
    """Long-leg (``I_L``) and short-leg (``I_S``) selections at consecutive rebalances."""

    times: tuple[int, ...]
    longs: tuple[frozenset, ...]
    shorts: tuple[frozenset, ...]

    def __post_init__(self):
        if not (len(self.times) == len(self.longs) == len(self.shorts)):
            raise ValueError("times, longs and shorts must align")
        for t, lo, sh in zip(self.times, self.longs, self.shorts):
            if lo & sh:
                raise ValueError(f"long and short selections overlap at t={t}")

    def both(self, k: int) -> frozenset:
        return self.longs[k] | self.shorts[k]


def jaccard_stats(history: SelectionHistory, n: int) -> tuple[float, float, float]:
    """``(A(n), B(n), C(n))`` selection-overlap coefficients at a lag of ``n`` rebalances.

    ``A`` is the Jaccard index of the combined selections, ``B`` the share
    that stayed on the same side and ``C`` the share that switched sides, all
    over the same union, so ``A = B + C``.  Pairs whose union is empty are
    skipped; pairs running past the end of the history are truncated.
    """
    if n < 1:
        raise ValueError("lag must be >= 1")
    if len(history.times) < n + 1:
        raise UndefinedStatisticError(f"history of {len(history.times)} rebalances is too short for n={n}")
    a_sum = b_sum = c_sum = 0.0
    used = 0
    for k in range(len(history.times) - n):
        L0, S0, L1, S1 = history.longs[k], history.shorts[k], history.longs[k + n], history.shorts[k + n]
        union = len((L0 | S0) | (L1 | S1))
        if union == 0:
            continue
        a_sum += len((L0 | S0) & (L1 | S1)) / union
        b_sum += (len(L0 & L1) + len(S0 & S1)) / union
        c_sum += (len(L0 & S1) + len(S0 & L1)) / union
        used += 1
    if used == 0:
        raise UndefinedStatisticError("every selection union is empty")
    return a_sum / used, b_sum / used, c_sum / used


@dataclass(frozen=True)
class RegressionPoint:
    time: int
    beta: float
    kappa: float
    r_squared: float
    n_obs: int


def correction_regression(epsilon_dagger: np.ndarray, forward_returns: np.ndarray,
                          time: int = 0) -> RegressionPoint:
    """OLS of forward raw returns on ``eps_dagger`` across assets at one time.

    A negative slope means this period's abnormal returns were followed by
    moves in the correcting direction.
    """
    x = np.asarray(epsilon_dagger, dtype=np.float64)
    y = np.asarray(forward_returns, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if len(x) < 3:
        raise UndefinedStatisticError(f"t={time}: {len(x)} observations, need 3")
    dx = x - x.mean()
    sxx = np.dot(dx, dx)
    if sxx <= 0.0:
        raise UndefinedStatisticError(f"t={time}: regressor has zero variance")
    dy = y - y.mean()
    beta = np.dot(dx, dy) / sxx
    kappa = y.mean() - beta * x.mean()
    resid = y - (beta * x + kappa)
    syy = np.dot(dy, dy)
    r2 = 1.0 - np.dot(resid, resid) / syy if syy > 0 else 1.0
    return RegressionPoint(int(time), float(beta), float(kappa), float(r2), int(len(x)))


def cumulative_beta(points: Sequence[RegressionPoint]) -> np.ndarray:
    return np.cumsum([p.beta for p in points])
