"""Model-selection experiments: regime/activation grid and compression sweep.

Every test time gets its own freshly fitted model, trained only on samples
that end at or before ``t - tau*``, which then reconstructs the realized
normalized cross-section at ``t``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import augmentation as aug
from .autoencoder import AEConfig, init_model, train
from .backtest import WORKERS_ENV, model_seed, test_schedule
from .diagnostics import generalization_rmse
from .errors import HistoryExhaustedError
from .market_data import PricePanel, normalize_cross_section

logger = logging.getLogger(__name__)

COMPRESSION_GRID = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
ACTIVATIONS = ("linear", "tanh")


@dataclass(frozen=True)
class GeneralizationResult:
    regime: str
    activation: str
    tau_star: int
    compression_ratio: float
    rmse: float
    n_times: int
    n_assets: int


def predict_test_time(panel: PricePanel, t: int, tau_star: int, regime: str,
                      activation: str = "linear", compression_ratio: float = 50.0,
                      count: int = aug.DEFAULT_COUNT, seed: int = 0, epochs: int = 50,
                      batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Fit a model for anchor ``t`` and return ``(realized, reconstructed)`` at ``t``."""
    stages = aug.build_sets(regime, t, tau_star, panel, count)
    cfg = AEConfig(panel.n_assets, compression_ratio, activation, epochs=epochs,
                   batch_size=batch_size, seed=model_seed(seed, tau_star, t))
    model = init_model(cfg)
    for stage in stages:
        model = train(model, stage)
    realized = normalize_cross_section(panel.returns(tau_star), t).values
    return realized, model.reconstruct(realized)


def default_test_times(panel: PricePanel, tau_max: int, count: int, n_times: int) -> tuple[int, ...]:
    """The ``n_times`` earliest test days for which every ``tau* <= tau_max`` has full history."""
    start = panel.first_time + aug.required_history(tau_max, count)
    end = min(start + n_times - 1, panel.last_time)
    if start > panel.last_time:
        raise HistoryExhaustedError(panel.first_time - (start - panel.last_time), panel.first_time, tau_max)
    return test_schedule(start, end).times


def evaluate_generalization(panel: PricePanel, tau_star: int, regime: str,
                            test_times: Sequence[int], activation: str = "linear",
                            compression_ratio: float = 50.0, count: int = aug.DEFAULT_COUNT,
                            seed: int = 0, epochs: int = 50,
                            batch_size: int = 128) -> GeneralizationResult:
    """Test-period RMSE of one (regime, activation, tau*) model family."""
    realized, predicted = [], []
    for t in test_times:
        r, p = predict_test_time(panel, t, tau_star, regime, activation, compression_ratio,
                                 count, seed, epochs, batch_size)
        realized.append(r)
        predicted.append(p)
    rmse = generalization_rmse(np.array(realized), np.array(predicted))
    return GeneralizationResult(regime, activation, tau_star, compression_ratio, rmse,
                                len(test_times), panel.n_assets)


def _job(args):
    panel, kwargs = args
    return evaluate_generalization(panel, **kwargs)


def _map(jobs: list, workers: int | None):
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def generalization_grid(panel: PricePanel, tau_values: Iterable[int], test_times: Sequence[int],
                        regimes: Sequence[str] = aug.REGIMES,
                        activations: Sequence[str] = ACTIVATIONS,
                        compression_ratio: float = 50.0, count: int = aug.DEFAULT_COUNT,
                        seed: int = 0, epochs: int = 50, batch_size: int = 128,
                        workers: int | None = None) -> list[GeneralizationResult]:
    """RMSE for every (regime, activation, tau*) cell.

    Fine-tuning is undefined at ``tau* = 1``; that cell is reported as NaN.
    """
    jobs, slots = [], []
    for tau in tau_values:
        for regime in regimes:
            for act in activations:
                if regime == aug.FT and tau < 2:
                    slots.append(GeneralizationResult(regime, act, tau, compression_ratio,
                                                      float("nan"), 0, panel.n_assets))
                    continue
                slots.append(None)
                jobs.append((panel, dict(tau_star=tau, regime=regime, test_times=tuple(test_times),
                                         activation=act, compression_ratio=compression_ratio,
                                         count=count, seed=seed, epochs=epochs,
                                         batch_size=batch_size)))
    done = iter(_map(jobs, workers))
    return [s if s is not None else next(done) for s in slots]


def compression_sweep(panel: PricePanel, tau_star: int, test_times: Sequence[int],
                      ratios: Sequence[float] = COMPRESSION_GRID, regime: str = aug.MTS,
                      activation: str = "linear", count: int = aug.DEFAULT_COUNT,
                      seed: int = 0, epochs: int = 50, batch_size: int = 128,
                      workers: int | None = None) -> list[GeneralizationResult]:
    """RMSE as a function of the middle-layer compression ratio at fixed ``tau*``."""
    jobs = [(panel, dict(tau_star=tau_star, regime=regime, test_times=tuple(test_times),
                         activation=activation, compression_ratio=c, count=count, seed=seed,
                         epochs=epochs, batch_size=batch_size)) for c in ratios]
    return _map(jobs, workers)
