"""Synthetic factor markets with injected mispricing shocks.

Daily log-returns are ``B f(t) + u(t)`` plus shocks: with probability
``mispricing_prob`` an asset-day receives a jump ``s`` of random sign, and the
following ``reversal_days`` days drift by ``reversal_coeff * s`` in total
(spread evenly).  A negative ``reversal_coeff`` gives an overreaction that
partly unwinds; a positive one gives momentum.  Prices start at 100.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .market_data import PricePanel

START_PRICE = 100.0


@dataclass(frozen=True)
class SynthSpec:
    n_assets: int = 50
    n_days: int = 3000
    n_factors: int = 10
    loading_scale: float = 1.0
    factor_vol: float = 0.004
    idio_vol: float = 0.01
    mispricing_prob: float = 0.0
    mispricing_scale: float = 0.05
    reversal_coeff: float = 0.0
    reversal_days: int = 20
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.n_assets < 1 or self.n_days < 2:
            raise ConfigError("need at least one asset and two days")
        if not 1 <= self.n_factors <= self.n_assets:
            raise ConfigError(f"n_factors must lie in [1, n_assets={self.n_assets}], got {self.n_factors}")
        if self.factor_vol <= 0 or self.idio_vol < 0 or self.loading_scale <= 0:
            raise ConfigError("factor_vol and loading_scale must be > 0, idio_vol >= 0")
        if not 0.0 <= self.mispricing_prob <= 1.0:
            raise ConfigError("mispricing_prob must lie in [0, 1]")
        if self.mispricing_scale < 0:
            raise ConfigError("mispricing_scale must be >= 0")
        if not -1.0 <= self.reversal_coeff <= 1.0:
            raise ConfigError("reversal_coeff must lie in [-1, 1]")
        if self.reversal_days < 1:
            raise ConfigError("reversal_days must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    def asset_ids(self) -> tuple[str, ...]:
        width = max(3, len(str(self.n_assets - 1)))
        return tuple(f"A{i:0{width}d}" for i in range(self.n_assets))


@dataclass(frozen=True, eq=False)
class ShockLedger:
    """Applied shocks: ``asset`` (index), ``day``, signed ``shock`` size."""

    asset: np.ndarray
    day: np.ndarray
    shock: np.ndarray
    reversal_coeff: float
    reversal_days: int

    def __len__(self) -> int:
        return len(self.day)

    @property
    def sign(self) -> np.ndarray:
        return np.sign(self.shock).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SynthMarket:
    panel: PricePanel
    ledger: ShockLedger
    log_returns: np.ndarray  # n_assets x n_days, column 0 is zero
    loadings: np.ndarray
    factors: np.ndarray


def simulate(spec: SynthSpec) -> SynthMarket:
    """Generate a market and keep the latent pieces for oracle checks."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d, m = spec.n_assets, spec.n_days, spec.n_factors
    loadings = rng.normal(0.0, spec.loading_scale, size=(n, m))
    factors = rng.normal(0.0, spec.factor_vol, size=(m, d - 1))
    noise = rng.normal(0.0, 1.0, size=(n, d - 1)) * spec.idio_vol
    hits = rng.random(size=(n, d - 1)) < spec.mispricing_prob
    signs = np.where(rng.random(size=(n, d - 1)) < 0.5, -1.0, 1.0)

    logret = np.zeros((n, d))
    logret[:, 1:] = loadings @ factors + noise
    asset_idx, col = np.nonzero(hits)
    day = col + 1
    order = np.lexsort((asset_idx, day))
    asset_idx, day = asset_idx[order], day[order]
    shock = spec.mispricing_scale * signs[asset_idx, day - 1]
    logret[asset_idx, day] += shock
    if spec.reversal_coeff != 0.0 and len(day):
        per_day = spec.reversal_coeff * shock / spec.reversal_days
        for k in range(1, spec.reversal_days + 1):
            tail = day + k
            ok = tail < d
            np.add.at(logret, (asset_idx[ok], tail[ok]), per_day[ok])

    prices = START_PRICE * np.exp(np.cumsum(logret, axis=1))
    panel = PricePanel(spec.asset_ids(), np.arange(d), prices)
    ledger = ShockLedger(asset_idx.astype(np.int64), day.astype(np.int64), shock,
                         spec.reversal_coeff, spec.reversal_days)
    return SynthMarket(panel, ledger, logret, loadings, factors)


def generate(spec: SynthSpec) -> tuple[PricePanel, ShockLedger]:
    market = simulate(spec)
    return market.panel, market.ledger


def write_ledger(ledger: ShockLedger, asset_ids, target) -> None:
    lines = ["asset,day,shock,sign,rho"]
    for a, dday, s in zip(ledger.asset, ledger.day, ledger.shock):
        lines.append(f"{asset_ids[a]},{int(dday)},{float(s)!r},{int(np.sign(s))},{ledger.reversal_coeff!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", newline="") as fh:
            fh.write(text)


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
