"""Rolling relearn / score / rebalance loop over staggered schedules.

With a holding period of ``tau*`` days there are ``tau*`` disjoint rebalance
calendars (offsets ``0 .. tau*-1``).  Each offset runs its own sequential loop:
build the training set(s), fit a fresh autoencoder, score abnormal returns,
group them into quantiles, go long the lowest quantile and short the highest,
and hold until the next rebalance.  Offsets are independent and can run in
parallel; their results are merged in offset order.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augmentation as aug
from .autoencoder import AEConfig, init_model, restoration_errors, train
from .diagnostics import RegressionPoint, SelectionHistory, correction_regression
from .errors import (
    DegenerateLegError,
    EmptyScheduleError,
    HistoryExhaustedError,
    MtsaugError,
)
from .market_data import PricePanel, normalize_cross_section
from .mispricing import AbnormalReturnPanel, QuantileAssignment, abnormal_returns, assign_quantiles

logger = logging.getLogger(__name__)

WORKERS_ENV = "MTSAUG_WORKERS"


@dataclass(frozen=True)
class Schedule:
    kind: str
    tau_star: int
    start: int
    end: int
    offset: int
    times: tuple[int, ...]


def management_schedule(start: int, end: int, tau_star: int, offset: int) -> Schedule:
    """Rebalance times ``start + offset, start + offset + tau*, ...`` up to ``end`` inclusive."""
    if not 0 <= offset < tau_star:
        raise ValueError(f"offset must lie in [0, {tau_star}), got {offset}")
    first = start + offset
    if first > end:
        raise EmptyScheduleError(f"offset {offset}: first rebalance {first} is after end {end}")
    return Schedule("management", tau_star, start, end, offset,
                    tuple(range(first, end + 1, tau_star)))


def test_schedule(start: int, end: int, tau_star: int = 1) -> Schedule:
    """Every day from ``start`` to ``end`` inclusive (generalization-error evaluation only)."""
    if start > end:
        raise EmptyScheduleError(f"test schedule [{start}, {end}] is empty")
    return Schedule("test", tau_star, start, end, 0, tuple(range(start, end + 1)))


@dataclass(frozen=True)
class PortfolioState:
    time: int
    long_set: frozenset
    short_set: frozenset
    excluded: frozenset = frozenset()
    prev_long: frozenset = frozenset()
    prev_short: frozenset = frozenset()
    degenerate: bool = False

    def __post_init__(self):
        if self.long_set & self.short_set:
            raise ValueError("an asset cannot be both long and short")
        if self.excluded & (self.long_set | self.short_set):
            raise ValueError("excluded assets cannot be held")


def build_longshort(assignment: QuantileAssignment, prev: PortfolioState | None,
                    restricted: bool = True) -> PortfolioState:
    """Long the first quantile, short the last.

    With ``restricted`` an asset held long at the previous rebalance may not
    enter the short leg now, and vice versa; such assets are recorded in
    ``excluded``.  Only the immediately preceding rebalance is consulted.

    Raises ``DegenerateLegError`` (carrying the flagged state as ``.state``)
    when a leg ends up empty.
    """
    if assignment.q_count < 2:
        raise ValueError("a long-short portfolio needs at least two quantiles")
    long_set = frozenset(assignment.members(1))
    short_set = frozenset(assignment.members(assignment.q_count))
    prev_long = prev.long_set if prev is not None else frozenset()
    prev_short = prev.short_set if prev is not None else frozenset()
    excluded = frozenset()
    if restricted:
        excluded = (short_set & prev_long) | (long_set & prev_short)
        short_set = short_set - prev_long
        long_set = long_set - prev_short
    if not long_set or not short_set:
        state = PortfolioState(assignment.time, frozenset(), frozenset(),
                               excluded | long_set | short_set, prev_long, prev_short, True)
        err = DegenerateLegError(f"t={assignment.time}: a leg is empty after the reversal restriction")
        err.state = state
        raise err
    return PortfolioState(assignment.time, long_set, short_set, excluded, prev_long, prev_short)


@dataclass(frozen=True, eq=False)
class PeriodRecord:
    time: int
    quantile_returns: np.ndarray
    benchmark: float
    active: np.ndarray
    spread: float
    long_return: float
    short_return: float
    degenerate: bool = False


def period_performance(state: PortfolioState, assignment: QuantileAssignment,
                       forward_returns: np.ndarray) -> PeriodRecord:
    """Equal-weight quantile, active and long-short spread returns over one holding period.

    ``forward_returns`` are raw (not normalized) returns aligned with
    ``assignment.asset_ids``.
    """
    fwd = np.asarray(forward_returns, dtype=np.float64)
    ids = assignment.asset_ids
    if len(fwd) != len(ids):
        raise ValueError("forward returns do not align with the assignment")
    universe = assignment.labels > 0
    if np.isnan(fwd[universe]).any():
        raise MtsaugError(f"t={assignment.time}: missing forward return for a universe asset")
    benchmark = float(fwd[universe].mean())
    qret = np.array([fwd[assignment.labels == q].mean() for q in range(1, assignment.q_count + 1)])
    active = qret - benchmark
    if state.degenerate:
        return PeriodRecord(state.time, qret, benchmark, active, 0.0, float("nan"),
                            float("nan"), True)
    pos = {a: i for i, a in enumerate(ids)}
    long_ret = float(fwd[[pos[a] for a in sorted(state.long_set)]].mean())
    short_ret = float(fwd[[pos[a] for a in sorted(state.short_set)]].mean())
    return PeriodRecord(state.time, qret, benchmark, active, long_ret - short_ret,
                        long_ret, short_ret)


@dataclass(frozen=True, eq=False)
class PerformanceSeries:
    offset: int
    holding: int
    times: np.ndarray
    quantile_returns: np.ndarray
    benchmark: np.ndarray
    active: np.ndarray
    spread: np.ndarray
    degenerate: np.ndarray

    @classmethod
    def from_records(cls, offset: int, holding: int, q_count: int,
                     records: Sequence[PeriodRecord]) -> "PerformanceSeries":
        k = len(records)
        return cls(
            offset, holding,
            np.array([r.time for r in records], dtype=np.int64),
            np.array([r.quantile_returns for r in records]).reshape(k, q_count),
            np.array([r.benchmark for r in records], dtype=float),
            np.array([r.active for r in records]).reshape(k, q_count),
            np.array([r.spread for r in records], dtype=float),
            np.array([r.degenerate for r in records], dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def cum_spread(self) -> np.ndarray:
        return np.cumsum(self.spread)

    @property
    def cum_active(self) -> np.ndarray:
        return np.cumsum(self.active, axis=0)

    @property
    def cum_quantile_returns(self) -> np.ndarray:
        return np.cumsum(self.quantile_returns, axis=0)


def equal_weight_combine(series: Sequence[PerformanceSeries]) -> PerformanceSeries:
    """Average staggered offset series on their common daily grid.

    The grid is the union of the members' rebalance times, clipped to the
    span where every member holds a position.  At each grid time the combined
    period return is the mean over members of each member's most recent
    period return (the one whose holding window covers that time).
    """
    series = [s for s in series]
    if not series:
        raise ValueError("nothing to combine")
    if len(series) == 1:
        return series[0]
    live = [s for s in series if len(s)]
    if len(live) != len(series):
        raise ValueError("cannot combine an empty series")
    lo = max(int(s.times[0]) for s in series)
    hi = min(int(s.times[-1]) + s.holding - 1 for s in series)
    grid = np.unique(np.concatenate([s.times for s in series]))
    grid = grid[(grid >= lo) & (grid <= hi)]
    if len(grid) == 0:
        raise ValueError("series have no overlapping holding span")
    q = series[0].quantile_returns.shape[1]
    acc = {name: np.zeros((len(grid), q)) for name in ("quantile_returns", "active")}
    bench = np.zeros(len(grid))
    spread = np.zeros(len(grid))
    for s in series:
        idx = np.searchsorted(s.times, grid, side="right") - 1
        acc["quantile_returns"] += s.quantile_returns[idx]
        acc["active"] += s.active[idx]
        bench += s.benchmark[idx]
        spread += s.spread[idx]
    k = float(len(series))
    return PerformanceSeries(-1, series[0].holding, grid, acc["quantile_returns"] / k,
                             bench / k, acc["active"] / k, spread / k,
                             np.zeros(len(grid), dtype=bool))


@dataclass(frozen=True)
class BacktestConfig:
    tau_star: int = 20
    q_count: int = 5
    regime: str = aug.MTS
    activation: str = "linear"
    compression_ratio: float = 50.0
    count: int = aug.DEFAULT_COUNT
    restricted: bool = True
    seed: int = 0
    start: int | None = None
    end: int | None = None
    rebalances: int | None = None
    offsets: tuple[int, ...] | None = None
    epochs: int = 50
    batch_size: int = 128
    warm_start: bool = False
    workers: int | None = None

    def resolved_offsets(self) -> tuple[int, ...]:
        return tuple(range(self.tau_star)) if self.offsets is None else tuple(self.offsets)


@dataclass(frozen=True, eq=False)
class Rebalance:
    state: PortfolioState
    assignment: QuantileAssignment
    abnormal: AbnormalReturnPanel
    period: PeriodRecord
    regression: RegressionPoint | None
    dropped_samples: int = 0


@dataclass(frozen=True)
class RebalanceFailure:
    offset: int
    time: int
    error: str
    message: str


@dataclass(eq=False)
class OffsetRun:
    offset: int
    schedule: tuple[int, ...]
    rebalances: list[Rebalance] = field(default_factory=list)
    failure: RebalanceFailure | None = None


@dataclass(eq=False)
class BacktestResult:
    config: BacktestConfig
    asset_ids: tuple[str, ...]
    runs: dict[int, OffsetRun]

    def series(self, offset: int) -> PerformanceSeries:
        run = self.runs[offset]
        return PerformanceSeries.from_records(offset, self.config.tau_star, self.config.q_count,
                                              [r.period for r in run.rebalances])

    @property
    def all_series(self) -> list[PerformanceSeries]:
        return [self.series(o) for o in sorted(self.runs)]

    def combined(self) -> PerformanceSeries:
        return equal_weight_combine([s for s in self.all_series if len(s)])

    @property
    def failures(self) -> list[RebalanceFailure]:
        return [r.failure for _, r in sorted(self.runs.items()) if r.failure is not None]

    @property
    def empty(self) -> bool:
        return all(not r.rebalances for r in self.runs.values())

    def selection_history(self, offset: int) -> SelectionHistory:
        """Extreme-quantile members (before restrictions) at each rebalance of ``offset``."""
        rebs = self.runs[offset].rebalances
        q = self.config.q_count
        return SelectionHistory(tuple(r.state.time for r in rebs),
                                tuple(frozenset(r.assignment.members(1)) for r in rebs),
                                tuple(frozenset(r.assignment.members(q)) for r in rebs))

    def epsilon_history(self, offset: int) -> np.ndarray:
        """``eps_dagger`` on the rebalance grid of ``offset`` (rebalances x assets)."""
        rebs = self.runs[offset].rebalances
        return np.array([r.abnormal.epsilon_dagger for r in rebs]).reshape(len(rebs), len(self.asset_ids))

    def regressions(self, offset: int) -> list[RegressionPoint]:
        return [r.regression for r in self.runs[offset].rebalances if r.regression is not None]

    def cumulative_beta(self) -> float:
        """Sum of the regression slopes over every offset and rebalance."""
        return float(sum(p.beta for o in self.runs for p in self.regressions(o)))


def model_seed(run_seed: int, offset: int, time: int) -> int:
    """Independent, reproducible seed for the model fitted at ``(offset, time)``."""
    ss = np.random.SeedSequence([int(run_seed), int(offset), int(time)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rebalance(config: BacktestConfig, panel: PricePanel, offset: int, t: int,
               prev: PortfolioState | None, prev_model):
    tau = config.tau_star
    stages = aug.build_sets(config.regime, t, tau, panel, config.count)
    ae_cfg = AEConfig(panel.n_assets, config.compression_ratio, config.activation,
                      epochs=config.epochs, batch_size=config.batch_size,
                      seed=model_seed(config.seed, offset, t))
    model = prev_model if (config.warm_start and prev_model is not None) else init_model(ae_cfg)
    for stage in stages:
        model = train(model, stage)
    xi = restoration_errors(model, aug.target_window(stages))
    realized = normalize_cross_section(panel.returns(tau), t)
    abnormal = abnormal_returns(realized, model, xi, panel.asset_ids, tau)
    assignment = assign_quantiles(abnormal, config.q_count)
    try:
        state = build_longshort(assignment, prev, config.restricted)
    except DegenerateLegError as exc:
        logger.warning("offset %d t=%d: %s; recording a zero spread", offset, t, exc)
        state = exc.state
    forward = panel.returns(tau).at(t + tau)
    period = period_performance(state, assignment, forward)
    try:
        regression = correction_regression(abnormal.epsilon_dagger, forward, t)
    except MtsaugError as exc:
        logger.info("offset %d t=%d: regression undefined (%s)", offset, t, exc)
        regression = None
    dropped = sum(s.dropped for s in stages)
    return Rebalance(state, assignment, abnormal, period, regression, dropped), model


def _run_offset(config: BacktestConfig, panel: PricePanel, offset: int,
                times: tuple[int, ...]) -> OffsetRun:
    run = OffsetRun(offset, times)
    prev, prev_model = None, None
    for t in times:
        try:
            reb, prev_model = _rebalance(config, panel, offset, t, prev, prev_model)
        except MtsaugError as exc:
            run.failure = RebalanceFailure(offset, t, type(exc).__name__, str(exc))
            logger.error("offset %d aborted at t=%d: %s", offset, t, exc)
            break
        run.rebalances.append(reb)
        prev = reb.state
    return run


def _worker_count(config: BacktestConfig) -> int:
    if config.workers is not None:
        return max(1, int(config.workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def plan_schedules(config: BacktestConfig, panel: PricePanel) -> dict[int, tuple[int, ...]]:
    tau = config.tau_star
    start = config.start
    if start is None:
        start = panel.first_time + aug.required_history(tau, config.count)
    end = panel.last_time - tau if config.end is None else min(config.end, panel.last_time - tau)
    if config.start is None and start > end:
        # not even one rebalance fits between the training history and the forward period
        raise HistoryExhaustedError(end - aug.required_history(tau, config.count),
                                    panel.first_time, tau)
    plans = {}
    for offset in config.resolved_offsets():
        times = management_schedule(start, end, tau, offset).times
        if config.rebalances is not None:
            times = times[:config.rebalances]
        plans[offset] = times
    earliest = min(ts[0] for ts in plans.values()) - aug.required_history(tau, config.count)
    if earliest < panel.first_time:
        raise HistoryExhaustedError(earliest, panel.first_time, tau)
    return plans


def run_backtest(config: BacktestConfig, panel: PricePanel) -> BacktestResult:
    """Run every offset schedule and collect per-rebalance records.

    The asset universe is fixed for the run: assets missing anywhere between
    the earliest training price and the last forward price are dropped.
    A module error at a rebalance ends that offset's series and is recorded in
    ``BacktestResult.failures`` with its ``(offset, time)``.
    """
    if config.regime not in aug.REGIMES:
        raise ValueError(f"unknown regime {config.regime!r}")
    plans = plan_schedules(config, panel)
    tau = config.tau_star
    span_start = min(ts[0] for ts in plans.values()) - aug.required_history(tau, config.count)
    span_end = max(ts[-1] for ts in plans.values()) + tau
    universe = panel.select(start=span_start, end=span_end).fixed_universe(span_start, span_end)

    offsets = sorted(plans)
    workers = _worker_count(config)
    if workers > 1 and len(offsets) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_offset, config, universe, o, plans[o]) for o in offsets]
            runs = [f.result() for f in futures]
    else:
        runs = [_run_offset(config, universe, o, plans[o]) for o in offsets]
    return BacktestResult(config, universe.asset_ids, {r.offset: r for r in runs})


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def series_header(q_count: int, with_offset: bool = True) -> list[str]:
    qs = [f"q{q}" for q in range(1, q_count + 1)]
    head = ["offset"] if with_offset else []
    return head + ["time"] + qs + ["benchmark"] + [f"active_{c}" for c in qs] + ["spread"]


def write_backtest(result: BacktestResult, directory) -> list[Path]:
    """Serialize a backtest as delimited text files; returns the paths written.

    ``periods.csv``    one row per (offset, rebalance): returns, legs, exclusions
    ``combined.csv``   equal-weight combination across offsets with cumulative sums
    ``abnormal.csv``   abnormal returns and quantile labels per (offset, time, asset)
    ``regression.csv`` correction-regression slope per (offset, rebalance)
    ``failures.csv``   aborted offsets with the error that stopped them
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    q = result.config.q_count
    written = []

    rows = []
    for o in sorted(result.runs):
        for r in result.runs[o].rebalances:
            p, s = r.period, r.state
            rows.append([_fmt(o), _fmt(p.time)] + [_fmt(v) for v in p.quantile_returns]
                        + [_fmt(p.benchmark)] + [_fmt(v) for v in p.active]
                        + [_fmt(p.spread), _fmt(p.long_return), _fmt(p.short_return),
                           _fmt(p.degenerate), _fmt(len(s.long_set)), _fmt(len(s.short_set)),
                           ";".join(sorted(s.long_set)), ";".join(sorted(s.short_set)),
                           ";".join(sorted(s.excluded))])
    header = series_header(q) + ["long_return", "short_return", "degenerate", "n_long",
                                 "n_short", "long", "short", "excluded"]
    _write_rows(out / "periods.csv", header, rows)
    written.append(out / "periods.csv")

    rows = []
    live = [s for s in result.all_series if len(s)]
    if live:
        comb = equal_weight_combine(live)
        cum_a, cum_s = comb.cum_active, comb.cum_spread
        for k in range(len(comb)):
            rows.append([_fmt(comb.times[k])] + [_fmt(v) for v in comb.quantile_returns[k]]
                        + [_fmt(comb.benchmark[k])] + [_fmt(v) for v in comb.active[k]]
                        + [_fmt(comb.spread[k])] + [_fmt(v) for v in cum_a[k]] + [_fmt(cum_s[k])])
    header = (series_header(q, with_offset=False) + [f"cum_active_q{j}" for j in range(1, q + 1)]
              + ["cum_spread"])
    _write_rows(out / "combined.csv", header, rows)
    written.append(out / "combined.csv")

    rows = []
    for o in sorted(result.runs):
        for r in result.runs[o].rebalances:
            a = r.abnormal
            for i, asset in enumerate(a.asset_ids):
                rows.append([_fmt(o), _fmt(a.time), asset, _fmt(a.epsilon[i]),
                             _fmt(a.epsilon_dagger[i]), _fmt(a.xi_used[i]),
                             _fmt(r.assignment.labels[i])])
    _write_rows(out / "abnormal.csv",
                ["offset", "time", "asset", "epsilon", "epsilon_dagger", "xi", "label"], rows)
    written.append(out / "abnormal.csv")

    rows = []
    for o in sorted(result.runs):
        for r in result.runs[o].rebalances:
            g = r.regression
            if g is not None:
                rows.append([_fmt(o), _fmt(g.time), _fmt(g.beta), _fmt(g.kappa),
                             _fmt(g.r_squared), _fmt(g.n_obs)])
    _write_rows(out / "regression.csv",
                ["offset", "time", "beta", "kappa", "r_squared", "n_obs"], rows)
    written.append(out / "regression.csv")

    rows = [[_fmt(f.offset), _fmt(f.time), f.error, f.message.replace(",", ";").replace("\n", " ")]
            for f in result.failures]
    _write_rows(out / "failures.csv", ["offset", "time", "error", "message"], rows)
    written.append(out / "failures.csv")
    return written


def config_dict(config: BacktestConfig) -> dict:
    d = asdict(config)
    d["offsets"] = list(config.resolved_offsets())
    return d
