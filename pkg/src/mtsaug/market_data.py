"""Price panels, multi-day returns and cross-sectional normalization.

Prices live in a dense ``asset x time`` matrix where ``NaN`` marks a missing
quote (not yet listed, delisted, not a constituent).  Times are integer
trading-day indices; ingestion maps calendar dates onto consecutive integers so
nothing downstream needs a calendar.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateCrossSectionError, EmptyDomainError, PanelError

logger = logging.getLogger(__name__)

DEFAULT_START_DATE = "2000-01-03"


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimited price files."""

    date: str = "date"
    asset: str = "asset"
    price: str = "price"
    delimiter: str = ","


@dataclass(frozen=True, eq=False)
class PricePanel:
    asset_ids: tuple[str, ...]
    times: np.ndarray
    prices: np.ndarray
    rejected_rows: int = 0
    _returns: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        prices = np.array(self.prices, dtype=np.float64)
        ids = tuple(str(a) for a in self.asset_ids)
        if prices.ndim != 2 or prices.shape != (len(ids), len(times)):
            raise PanelError(
                f"price matrix shape {prices.shape} does not match "
                f"{len(ids)} assets x {len(times)} times"
            )
        if len(ids) < 1 or len(times) < 2:
            raise PanelError("a panel needs at least one asset and two times")
        if len(set(ids)) != len(ids):
            raise PanelError("duplicate asset identifiers")
        if np.any(np.diff(times) <= 0):
            raise PanelError("times must be strictly increasing")
        present = ~np.isnan(prices)
        if not np.all(np.isfinite(prices[present])) or np.any(prices[present] <= 0):
            raise PanelError("present prices must be finite and strictly positive")
        times.setflags(write=False)
        prices.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "asset_ids", ids)

    @property
    def n_assets(self) -> int:
        return len(self.asset_ids)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def first_time(self) -> int:
        return int(self.times[0])

    @property
    def last_time(self) -> int:
        return int(self.times[-1])

    @property
    def missing_cells(self) -> int:
        return int(np.isnan(self.prices).sum())

    def column(self, t: int) -> int:
        """Column index of time ``t``; ``KeyError`` if ``t`` is not a panel time."""
        j = int(np.searchsorted(self.times, t))
        if j >= len(self.times) or self.times[j] != t:
            raise KeyError(t)
        return j

    def returns(self, tau: int) -> "ReturnPanel":
        """Memoized :func:`compute_returns`; the panel is immutable so caching is safe."""
        rp = self._returns.get(tau)
        if rp is None:
            rp = compute_returns(self, tau)
            self._returns[tau] = rp
        return rp

    def select(self, assets: Sequence[int] | None = None,
               start: int | None = None, end: int | None = None) -> "PricePanel":
        """Sub-panel by asset positions and an inclusive time range."""
        rows = np.arange(self.n_assets) if assets is None else np.asarray(assets, dtype=int)
        lo = 0 if start is None else int(np.searchsorted(self.times, start, side="left"))
        hi = self.n_times if end is None else int(np.searchsorted(self.times, end, side="right"))
        return PricePanel(
            asset_ids=tuple(self.asset_ids[i] for i in rows),
            times=self.times[lo:hi],
            prices=self.prices[np.ix_(rows, np.arange(lo, hi))],
        )

    def complete_assets(self, start: int, end: int) -> np.ndarray:
        """Positions of assets quoted at every panel time in ``[start, end]``."""
        mask = (self.times >= start) & (self.times <= end)
        return np.flatnonzero(~np.isnan(self.prices[:, mask]).any(axis=1))

    def fixed_universe(self, start: int, end: int) -> "PricePanel":
        """Keep only assets with no missing cell over ``[start, end]``.

        The autoencoder needs a constant input width, so an asset that is absent
        at any point of a run's span is dropped for that whole run.
        """
        keep = self.complete_assets(start, end)
        if len(keep) == 0:
            raise PanelError(f"no asset is quoted throughout [{start}, {end}]")
        dropped = self.n_assets - len(keep)
        if dropped:
            logger.info("fixed universe over [%d, %d]: dropped %d of %d assets",
                        start, end, dropped, self.n_assets)
        return self.select(assets=keep)


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    tau: int
    asset_ids: tuple[str, ...]
    times: np.ndarray
    returns: np.ndarray

    def column(self, t: int) -> int:
        j = int(np.searchsorted(self.times, t))
        if j >= len(self.times) or self.times[j] != t:
            raise KeyError(t)
        return j

    def at(self, t: int) -> np.ndarray:
        """Cross-section of returns at time ``t`` (NaN where undefined)."""
        return self.returns[:, self.column(t)]


@dataclass(frozen=True, eq=False)
class NormalizedReturnVector:
    time: int
    tau: int
    values: np.ndarray
    sigma: float


def load_price_panel(source, schema: Schema | None = None) -> PricePanel:
    """Read a long-format ``date, asset, price`` file into a dense panel.

    Rows with a non-positive, non-finite or unparseable price are rejected
    (logged, cell left missing) and counted in ``PricePanel.rejected_rows``.
    Dates become consecutive trading-day indices in sorted order and assets are
    sorted by identifier.

    Raises
    ------
    PanelError
        Missing columns, unparseable dates, duplicate ``(asset, date)`` rows or
        an empty file.
    """
    schema = schema or Schema()
    try:
        frame = pd.read_csv(source, sep=schema.delimiter, dtype=str,
                            keep_default_na=False, skipinitialspace=True)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise PanelError(f"cannot parse price file: {exc}") from exc
    missing = {schema.date, schema.asset, schema.price} - set(frame.columns)
    if missing:
        raise PanelError(f"price file lacks columns {sorted(missing)}")
    if frame.empty:
        raise PanelError("price file has no rows")

    try:
        dates = pd.to_datetime(frame[schema.date].str.strip(), format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise PanelError(f"unparseable date column: {exc}") from exc
    assets = frame[schema.asset].str.strip()
    # Python's float() is correctly rounded, so written panels reload bit-exactly
    prices = frame[schema.price].map(_parse_price).to_numpy(float)

    dup = pd.DataFrame({"a": assets, "d": dates}).duplicated(keep=False)
    if dup.any():
        first = frame.index[dup.to_numpy()][0]
        raise PanelError(
            f"duplicate (asset, date) row: {assets.iloc[first]!r} on {dates.iloc[first].date()}"
        )

    bad = ~np.isfinite(prices) | (prices <= 0)
    for i in np.flatnonzero(bad):
        # header is line 1
        logger.warning("rejected row %d: asset=%s date=%s price=%r", i + 2,
                       assets.iloc[i], dates.iloc[i].date(), frame[schema.price].iloc[i])

    date_index = np.sort(dates.unique())
    asset_index = sorted(assets.unique())
    rows = np.searchsorted(np.asarray(asset_index, dtype=object), assets.to_numpy(object))
    cols = np.searchsorted(date_index, dates.to_numpy())
    matrix = np.full((len(asset_index), len(date_index)), np.nan)
    ok = ~bad
    matrix[rows[ok], cols[ok]] = prices[ok]
    if len(date_index) < 2:
        raise PanelError("price file must cover at least two dates")
    return PricePanel(tuple(asset_index), np.arange(len(date_index)), matrix,
                      rejected_rows=int(bad.sum()))


def _parse_price(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return float("nan")


def write_price_panel(panel: PricePanel, target, schema: Schema | None = None,
                      start_date: str = DEFAULT_START_DATE) -> None:
    """Write ``panel`` in the long format read by :func:`load_price_panel`.

    Trading-day index ``k`` is written as the ``k``-th business day after
    ``start_date``.  Prices use ``repr`` so the round trip is bit-exact.
    """
    schema = schema or Schema()
    offsets = panel.times - panel.times[0]
    days = np.busday_offset(np.datetime64(start_date, "D"), offsets, roll="forward")
    labels = [str(d) for d in days]
    sep = schema.delimiter
    buf = io.StringIO()
    buf.write(sep.join([schema.date, schema.asset, schema.price]) + "\n")
    for j, label in enumerate(labels):
        col = panel.prices[:, j]
        for i, asset in enumerate(panel.asset_ids):
            p = col[i]
            if not np.isnan(p):
                buf.write(f"{label}{sep}{asset}{sep}{float(p)!r}\n")
    _write_text(target, buf.getvalue())


def _write_text(target, text: str) -> None:
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", newline="") as fh:
            fh.write(text)
    else:
        target.write(text)


def compute_returns(panel: PricePanel, tau: int) -> ReturnPanel:
    """``tau``-day simple returns ``(p(t) - p(t - tau)) / p(t - tau)``.

    A return is present only when both endpoints are quoted, so the first
    ``tau`` times are always missing.
    """
    tau = int(tau)
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if tau >= panel.n_times:
        raise EmptyDomainError(f"tau={tau} leaves no defined return in {panel.n_times} times")
    times = panel.times
    out = np.full(panel.prices.shape, np.nan)
    lag = np.searchsorted(times, times - tau)
    has_lag = (lag < len(times)) & (times[np.minimum(lag, len(times) - 1)] == times - tau)
    cur = np.flatnonzero(has_lag)
    prev = lag[cur]
    p0 = panel.prices[:, prev]
    out[:, cur] = (panel.prices[:, cur] - p0) / p0
    out.setflags(write=False)
    return ReturnPanel(tau, panel.asset_ids, times, out)


# dispersion below this fraction of the largest |return| is rounding noise
REL_DISPERSION_FLOOR = 1e-12


def _cross_sectional_std(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample std and present-count down axis 0, ignoring NaN.

    Columns whose spread is pure rounding noise (all values equal in exact
    arithmetic) get a std of 0.
    """
    present = ~np.isnan(values)
    n = present.sum(axis=0)
    filled = np.where(present, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=0) / n
        dev = np.where(present, values - mean, 0.0)
        std = np.sqrt((dev * dev).sum(axis=0) / (n - 1))
    scale = np.abs(filled).max(axis=0) if values.size else np.zeros(values.shape[1:])
    return np.where(std <= REL_DISPERSION_FLOOR * scale, 0.0, std), n


def normalize_cross_section(rp: ReturnPanel, t: int) -> NormalizedReturnVector:
    """Scale the cross-section at ``t`` to unit sample standard deviation.

    Missing cells stay NaN and are ignored when computing the dispersion.
    """
    values = rp.at(t)
    std, n = _cross_sectional_std(values[:, None])
    sigma = float(std[0])
    if n[0] < 2 or not np.isfinite(sigma) or sigma <= 0.0:
        raise DegenerateCrossSectionError(t)
    return NormalizedReturnVector(int(t), rp.tau, values / sigma, sigma)


def normalize_block(rp: ReturnPanel, times: Iterable[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized normalization of many complete cross-sections.

    Returns ``(values, sigmas, keep)`` where ``values`` is ``len(times) x N``.
    ``keep`` is False for times that are not panel times, have any missing
    asset, or have zero dispersion; those rows are filled with NaN.
    """
    times = np.asarray(list(times) if not isinstance(times, np.ndarray) else times, dtype=np.int64)
    cols = np.searchsorted(rp.times, times)
    in_panel = (cols < len(rp.times)) & (rp.times[np.minimum(cols, len(rp.times) - 1)] == times)
    block = np.full((rp.returns.shape[0], len(times)), np.nan)
    block[:, in_panel] = rp.returns[:, cols[in_panel]]
    std, _ = _cross_sectional_std(block)
    complete = ~np.isnan(block).any(axis=0)
    keep = in_panel & complete & np.isfinite(std) & (std > 0)
    values = np.full((len(times), rp.returns.shape[0]), np.nan)
    values[keep] = (block[:, keep] / std[keep]).T
    return values, np.where(keep, std, np.nan), keep
