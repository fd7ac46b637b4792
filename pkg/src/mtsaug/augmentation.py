"""Leakage-guarded training sets across timescales.

For an anchor time ``t`` and timescale ``tau`` the usable sample times are
``t - tau, t - tau - 1, ...``: the ``tau - 1`` most recent times are skipped
because their returns would share the price ``p(t)`` window with the return
being scored at ``t``.  Pooling these windows over ``tau = 1 .. tau*`` is the
multi-timescale (MTS) set; ``tau*`` alone is the single-timescale (STS) set;
fine-tuning (FT) splits the MTS set into ``tau < tau*`` and ``tau = tau*``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import (
    DegenerateCrossSectionError,
    HistoryExhaustedError,
    LeakageError,
    RegimeUndefinedError,
)
from .market_data import NormalizedReturnVector, PricePanel, normalize_block

logger = logging.getLogger(__name__)

DEFAULT_COUNT = 1200

MTS = "MTS"
STS = "STS"
FT = "FT"
FT_PRE = "FT-pre"
FT_FT = "FT-ft"
REGIMES = (MTS, STS, FT)


def train_times(t: int, tau: int, count: int = DEFAULT_COUNT,
                earliest: int | None = None) -> np.ndarray:
    """Sample times ``t - tau, t - tau - 1, ..., t - tau - count + 1`` (descending).

    If ``earliest`` is given it is the first time with a defined ``tau``-day
    return, and a window reaching before it raises ``HistoryExhaustedError``.
    """
    if tau < 1 or count < 1:
        raise ValueError(f"tau and count must be >= 1 (got tau={tau}, count={count})")
    newest = t - (tau - 1) - 1
    oldest = newest - count + 1
    if earliest is not None and oldest < earliest:
        raise HistoryExhaustedError(oldest, earliest, tau)
    return np.arange(newest, oldest - 1, -1, dtype=np.int64)


def required_history(tau_star: int, count: int = DEFAULT_COUNT) -> int:
    """Days of price history an anchor needs before it (largest window, ``tau = tau*``)."""
    return 2 * tau_star + count - 1


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Normalized return vectors tagged by ``(tau, t')``.

    ``values`` is ``n x N``; row ``k`` is the cross-section at ``times[k]``
    for timescale ``taus[k]`` divided by ``sigmas[k]``.
    """

    values: np.ndarray
    taus: np.ndarray
    times: np.ndarray
    sigmas: np.ndarray
    anchor: int
    target_tau: int
    regime: str
    asset_ids: tuple[str, ...] = ()
    dropped: int = 0

    def __post_init__(self):
        for name in ("values", "taus", "times", "sigmas"):
            getattr(self, name).setflags(write=False)
        if len(self.times) and np.any(self.times > self.anchor - self.taus):
            k = int(np.argmax(self.times > self.anchor - self.taus))
            raise LeakageError(
                f"sample t'={self.times[k]} (tau={self.taus[k]}) overlaps anchor {self.anchor}"
            )

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[NormalizedReturnVector]:
        for k in range(len(self)):
            yield NormalizedReturnVector(int(self.times[k]), int(self.taus[k]),
                                         self.values[k], float(self.sigmas[k]))

    @property
    def input_dim(self) -> int:
        return self.values.shape[1]

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.taus.tolist(), self.times.tolist()))

    def select_tau(self, tau: int, regime: str | None = None) -> "TrainingSet":
        mask = self.taus == tau
        return TrainingSet(self.values[mask], self.taus[mask], self.times[mask],
                           self.sigmas[mask], self.anchor, self.target_tau,
                           regime or self.regime, self.asset_ids)


def _collect(panel: PricePanel, t: int, taus, count: int, target_tau: int,
             regime: str) -> TrainingSet:
    values, tau_col, time_col, sigma_col = [], [], [], []
    dropped = 0
    for tau in taus:
        times = train_times(t, tau, count, earliest=panel.first_time + tau)
        vals, sig, keep = normalize_block(panel.returns(tau), times)
        dropped += int((~keep).sum())
        values.append(vals[keep])
        sigma_col.append(sig[keep])
        time_col.append(times[keep])
        tau_col.append(np.full(int(keep.sum()), tau, dtype=np.int64))
    if dropped:
        logger.info("%s set at t=%d: dropped %d degenerate cross-sections", regime, t, dropped)
    n = panel.n_assets
    ts = TrainingSet(
        values=np.concatenate(values) if values else np.empty((0, n)),
        taus=np.concatenate(tau_col) if tau_col else np.empty(0, np.int64),
        times=np.concatenate(time_col) if time_col else np.empty(0, np.int64),
        sigmas=np.concatenate(sigma_col) if sigma_col else np.empty(0),
        anchor=int(t), target_tau=int(target_tau), regime=regime,
        asset_ids=panel.asset_ids, dropped=dropped,
    )
    if len(ts) == 0:
        raise DegenerateCrossSectionError(t, f"every cross-section in the {regime} window at t={t} is degenerate")
    return ts


def build_mts(t: int, tau_star: int, panel: PricePanel, count: int = DEFAULT_COUNT) -> TrainingSet:
    """Union of the ``tau = 1 .. tau_star`` windows; order is tau ascending, then t' descending."""
    return _collect(panel, t, range(1, tau_star + 1), count, tau_star, MTS)


def build_sts(t: int, tau_star: int, panel: PricePanel, count: int = DEFAULT_COUNT) -> TrainingSet:
    return _collect(panel, t, [tau_star], count, tau_star, STS)


def build_ft(t: int, tau_star: int, panel: PricePanel,
             count: int = DEFAULT_COUNT) -> tuple[TrainingSet, TrainingSet]:
    """Pre-training set (``tau < tau_star``) and fine-tuning set (``tau = tau_star``)."""
    if tau_star < 2:
        raise RegimeUndefinedError("fine-tuning needs tau* >= 2 (no shorter timescales)")
    pre = _collect(panel, t, range(1, tau_star), count, tau_star, FT_PRE)
    ft = _collect(panel, t, [tau_star], count, tau_star, FT_FT)
    return pre, ft


def build_sets(regime: str, t: int, tau_star: int, panel: PricePanel,
               count: int = DEFAULT_COUNT) -> list[TrainingSet]:
    """Training stages for ``regime``: one set for MTS/STS, two for FT."""
    if regime == MTS:
        return [build_mts(t, tau_star, panel, count)]
    if regime == STS:
        return [build_sts(t, tau_star, panel, count)]
    if regime == FT:
        return list(build_ft(t, tau_star, panel, count))
    raise ValueError(f"unknown regime {regime!r}")


def target_window(stages: list[TrainingSet]) -> TrainingSet:
    """The ``tau = tau*`` samples of a regime's stages (the restoration-error window)."""
    last = stages[-1]
    return last.select_tau(last.target_tau)


def dump_training_set(ts: TrainingSet, target) -> None:
    """Debug dump: one row per ``(tau, t', asset)`` with the normalized value."""
    lines = ["tau,time,asset,value,sigma"]
    for k in range(len(ts)):
        for i, asset in enumerate(ts.asset_ids):
            lines.append(f"{ts.taus[k]},{ts.times[k]},{asset},{ts.values[k, i]!r},{ts.sigmas[k]!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)
