import numpy as np
import pytest

from mtsaug import augmentation as aug
from mtsaug.backtest import (
    BacktestConfig,
    PerformanceSeries,
    PortfolioState,
    _rebalance,
    build_longshort,
    equal_weight_combine,
    management_schedule,
    model_seed,
    period_performance,
    plan_schedules,
    run_backtest,
    test_schedule as make_test_schedule,
    write_backtest,
)
from mtsaug.errors import DegenerateLegError, EmptyScheduleError, HistoryExhaustedError, MtsaugError
from mtsaug.market_data import PricePanel
from mtsaug.mispricing import QuantileAssignment
from mtsaug.synth import SynthSpec, generate


def _assign(labels, q, ids=None, time=0):
    labels = np.asarray(labels)
    ids = ids or tuple("abcdefghijklmnopqrstuvwxyz"[: len(labels)])
    return QuantileAssignment(time, q, ids, labels)


class TestSchedules:
    def test_progression(self):
        assert management_schedule(0, 10, 3, 1).times == (1, 4, 7, 10)

    @pytest.mark.parametrize("tau", [1, 3, 20])
    def test_offsets_partition_days(self, tau):
        days = []
        for o in range(tau):
            days.extend(management_schedule(0, 100, tau, o).times)
        assert sorted(days) == list(range(101))

    def test_twenty_disjoint(self):
        sets = [set(management_schedule(5, 500, 20, o).times) for o in range(20)]
        assert len(sets) == 20 and sum(map(len, sets)) == len(set().union(*sets))

    def test_empty(self):
        with pytest.raises(EmptyScheduleError):
            management_schedule(10, 11, 5, 3)
        with pytest.raises(ValueError):
            management_schedule(0, 10, 3, 3)
        with pytest.raises(EmptyScheduleError):
            make_test_schedule(5, 4)

    def test_daily_test_schedule(self):
        assert make_test_schedule(3, 6).times == (3, 4, 5, 6)


class TestLongShort:
    def test_vacuous_restriction(self):
        s = build_longshort(_assign([1, 2, 3, 1, 3], 3), None)
        assert s.long_set == {"a", "d"} and s.short_set == {"c", "e"} and not s.excluded

    def test_restriction_excludes_previous_long(self):
        prev = PortfolioState(0, frozenset({"a", "b"}), frozenset({"e"}))
        cur = _assign([3, 1, 2, 1, 3], 3, time=5)
        s = build_longshort(cur, prev, restricted=True)
        assert "a" not in s.short_set and "a" in s.excluded
        assert s.short_set == {"e"} and s.long_set == {"b", "d"}
        s2 = build_longshort(cur, prev, restricted=False)
        assert "a" in s2.short_set and not s2.excluded

    def test_one_step_memory(self):
        # 'a' was long two rebalances ago only: eligible for the short leg again
        older = PortfolioState(0, frozenset({"a"}), frozenset({"c"}))
        mid = build_longshort(_assign([2, 1, 3, 2], 3), older)
        assert mid.long_set == {"b"}
        now = build_longshort(_assign([3, 2, 2, 1], 3), mid)
        assert now.short_set == {"a"}

    def test_degenerate_leg(self):
        prev = PortfolioState(0, frozenset({"c"}), frozenset({"a"}))
        with pytest.raises(DegenerateLegError) as info:
            build_longshort(_assign([1, 2, 3], 3), prev)
        st = info.value.state
        assert st.degenerate and not st.long_set and not st.short_set

    def test_state_invariants(self):
        with pytest.raises(ValueError):
            PortfolioState(0, frozenset({"a"}), frozenset({"a"}))


class TestPerformance:
    def test_constant_returns(self):
        a = _assign([1, 1, 2, 2, 3, 3], 3)
        rec = period_performance(build_longshort(a, None), a, np.full(6, 0.03))
        np.testing.assert_array_equal(rec.active, 0.0)
        assert rec.spread == 0.0 and rec.benchmark == pytest.approx(0.03)

    def test_zero_sum_when_divisible(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            labels = rng.permutation(np.repeat(np.arange(1, 6), 4))
            a = _assign(labels, 5)
            rec = period_performance(build_longshort(a, None), a, rng.normal(0, 0.05, 20))
            assert abs(rec.active.sum()) <= 1e-12

    def test_hand_example(self):
        a = _assign([1, 1, 2, 2], 2)
        rec = period_performance(build_longshort(a, None), a, np.array([0.01, 0.02, 0.03, 0.04]))
        assert rec.spread == pytest.approx(-0.02, abs=1e-15)
        assert rec.long_return == pytest.approx(0.015) and rec.short_return == pytest.approx(0.035)

    def test_degenerate_records_flagged_zero(self):
        a = _assign([1, 2], 2)
        st = PortfolioState(0, frozenset(), frozenset(), frozenset({"a", "b"}), degenerate=True)
        rec = period_performance(st, a, np.array([0.1, -0.1]))
        assert rec.degenerate and rec.spread == 0.0

    def test_missing_forward_return(self):
        a = _assign([1, 2], 2)
        with pytest.raises(MtsaugError):
            period_performance(build_longshort(a, None), a, np.array([0.1, np.nan]))


def _series(offset, times, spread, holding=2, q=2):
    k = len(times)
    return PerformanceSeries(offset, holding, np.asarray(times), np.zeros((k, q)), np.zeros(k),
                             np.zeros((k, q)), np.asarray(spread, float), np.zeros(k, bool))


class TestCombine:
    def test_single_identity(self):
        s = _series(0, [0, 2, 4], [0.1, 0.2, 0.3])
        assert equal_weight_combine([s]) is s

    def test_constant_pair(self):
        a = _series(0, [0, 2, 4, 6], [0.1] * 4)
        b = _series(1, [1, 3, 5, 7], [0.3] * 4)
        c = equal_weight_combine([a, b])
        np.testing.assert_array_equal(c.times, [1, 2, 3, 4, 5, 6, 7])
        np.testing.assert_allclose(c.spread, 0.2)

    def test_anticorrelated_variance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        a = _series(0, np.arange(0, 100, 2), x)
        b = _series(1, np.arange(1, 101, 2), -x + 0.1 * rng.normal(size=50))
        c = equal_weight_combine([a, b])
        assert c.spread.var() <= max(a.spread.var(), b.spread.var())

    def test_cumulative_is_a_sum(self):
        s = _series(0, [0, 2, 4], [0.1, -0.2, 0.3])
        np.testing.assert_allclose(s.cum_spread, [0.1, -0.1, 0.2])


def _small_market(seed=0, n_days=140, **kw):
    spec = dict(n_assets=10, n_days=n_days, n_factors=3, mispricing_prob=0.02,
                reversal_coeff=-0.5, reversal_days=3, seed=seed)
    spec.update(kw)
    panel, _ = generate(SynthSpec(**spec))
    return panel


SMALL = dict(tau_star=3, q_count=5, count=20, epochs=2, rebalances=6)


class TestRunBacktest:
    def test_structure(self):
        res = run_backtest(BacktestConfig(**SMALL), _small_market())
        assert sorted(res.runs) == [0, 1, 2] and not res.failures
        for o in range(3):
            s = res.series(o)
            assert len(s) == 6 and s.quantile_returns.shape == (6, 5)
            assert np.all(np.diff(s.times) == 3)
            assert np.abs(s.active.sum(axis=1)).max() <= 1e-12
        assert len(res.combined()) > 0
        hist = res.selection_history(0)
        assert all(len(lo) == 2 and len(sh) == 2 for lo, sh in zip(hist.longs, hist.shorts))
        assert res.epsilon_history(1).shape == (6, 10)

    def test_deterministic(self):
        cfg = BacktestConfig(**SMALL, seed=3)
        a = run_backtest(cfg, _small_market())
        b = run_backtest(cfg, _small_market())
        for o in a.runs:
            np.testing.assert_array_equal(a.series(o).spread, b.series(o).spread)
            np.testing.assert_array_equal(a.epsilon_history(o), b.epsilon_history(o))

    def test_parallel_matches_serial(self):
        cfg = BacktestConfig(**SMALL, seed=1)
        a = run_backtest(cfg, _small_market())
        b = run_backtest(BacktestConfig(**SMALL, seed=1, workers=2), _small_market())
        for o in a.runs:
            np.testing.assert_array_equal(a.epsilon_history(o), b.epsilon_history(o))

    def test_no_lookahead(self):
        # scoring at t must not change when every price after t is replaced
        panel = _small_market()
        cfg = BacktestConfig(**SMALL)
        t = plan_schedules(cfg, panel)[0][2]
        prices = np.array(panel.prices)
        prices[:, t + 1:] *= np.exp(np.random.default_rng(9).normal(0, 0.3, size=prices[:, t + 1:].shape))
        other = PricePanel(panel.asset_ids, panel.times, prices)
        a, _ = _rebalance(cfg, panel, 0, t, None, None)
        b, _ = _rebalance(cfg, other, 0, t, None, None)
        np.testing.assert_array_equal(a.abnormal.epsilon_dagger, b.abnormal.epsilon_dagger)
        np.testing.assert_array_equal(a.assignment.labels, b.assignment.labels)

    def test_restriction_toggles_exclusions(self):
        panel = _small_market(seed=2)
        on = run_backtest(BacktestConfig(**SMALL, restricted=True), panel)
        off = run_backtest(BacktestConfig(**SMALL, restricted=False), panel)
        for o in on.runs:
            for r_on, r_off in zip(on.runs[o].rebalances, off.runs[o].rebalances):
                assert not r_off.state.excluded
                assert not (r_on.state.short_set & r_on.state.prev_long)
                assert not (r_on.state.long_set & r_on.state.prev_short)

    def test_zero_variance_market(self):
        panel = PricePanel(tuple(f"S{i}" for i in range(5)), np.arange(100), np.full((5, 100), 10.0))
        res = run_backtest(BacktestConfig(tau_star=2, q_count=2, count=10, epochs=1), panel)
        assert res.empty and len(res.failures) == 2
        assert {f.error for f in res.failures} == {"DegenerateCrossSectionError"}

    def test_history_too_short(self):
        with pytest.raises(HistoryExhaustedError):
            plan_schedules(BacktestConfig(tau_star=3, count=500), _small_market())

    def test_failure_is_recorded_with_context(self):
        panel = _small_market()
        prices = np.array(panel.prices)
        cfg = BacktestConfig(**SMALL)
        t = plan_schedules(cfg, panel)[0][3]
        prices[:, t] = prices[:, t - 3]  # flat 3-day cross-section at one rebalance
        res = run_backtest(cfg, PricePanel(panel.asset_ids, panel.times, prices))
        f = res.failures[0]
        assert (f.offset, f.time) == (0, t)
        assert len(res.runs[0].rebalances) == 3 and len(res.runs[1].rebalances) == 6

    def test_fixed_universe_drops_gappy_asset(self):
        panel = _small_market()
        prices = np.array(panel.prices)
        prices[4, 30] = np.nan
        res = run_backtest(BacktestConfig(**SMALL), PricePanel(panel.asset_ids, panel.times, prices))
        assert panel.asset_ids[4] not in res.asset_ids and len(res.asset_ids) == 9

    def test_model_seed(self):
        assert model_seed(0, 1, 2) == model_seed(0, 1, 2)
        assert len({model_seed(0, o, t) for o in range(5) for t in range(50)}) == 250

    def test_write(self, tmp_path):
        res = run_backtest(BacktestConfig(**SMALL), _small_market())
        paths = write_backtest(res, tmp_path)
        assert {p.name for p in paths} == {"periods.csv", "combined.csv", "abnormal.csv",
                                          "regression.csv", "failures.csv"}
        head = (tmp_path / "periods.csv").read_text().splitlines()
        assert head[0].startswith("offset,time,q1,q2,q3,q4,q5,benchmark,active_q1")
        assert len(head) == 1 + 18
        assert len((tmp_path / "abnormal.csv").read_text().splitlines()) == 1 + 18 * 10


def test_warm_start_differs_from_fresh():
    panel = _small_market()
    fresh = run_backtest(BacktestConfig(**SMALL, offsets=(0,)), panel)
    warm = run_backtest(BacktestConfig(**SMALL, offsets=(0,), warm_start=True), panel)
    a, b = fresh.epsilon_history(0), warm.epsilon_history(0)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[1:], b[1:])
    assert aug.MTS == fresh.config.regime
