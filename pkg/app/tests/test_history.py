import math
from datetime import date, timedelta

import numpy as np
import pytest

from app.core.fixtures import LAPLACE_MU, gbm_prices, laplace_prices, laplace_returns
from app.core.history import (
    DegenerateSpreadError,
    HistoryError,
    InsufficientDataError,
    ccdf_tail_fit,
    empirical_ccdf,
    fit_scaling,
    lag_spread,
    log_returns,
    subgroup_stats,
)
from app.core.models import HistoricalStats, PriceSeries, ReturnSeries, TailSide


def make_series(log_prices, label="test"):
    start = date(2020, 1, 1)
    return PriceSeries(
        label=label,
        timestamps=[start + timedelta(days=i) for i in range(len(log_prices))],
        closes=np.exp(np.asarray(log_prices, dtype=float)),
    )


def exponential_sample(mu: float, count: int) -> np.ndarray:
    """Sample whose plotting positions lie exactly on exp(-mu x)."""
    k = np.arange(1, count + 1)
    return -np.log(1.0 - k / (count + 1.0)) / mu


def stats(product: float, lag: float = 1.0, sigma: float = 0.01) -> HistoricalStats:
    return HistoricalStats(sigma_H=sigma, mu_H=product / sigma, subgroup_size=300, lag=lag)


class TestLogReturns:
    def test_daily_returns(self):
        returns = log_returns(make_series([0.0, 0.1, 0.3, 0.2]))
        np.testing.assert_allclose(returns.values, [0.1, 0.2, -0.1], atol=1e-14)
        assert returns.lag == 1
        assert returns.label == "test"

    def test_lagged_returns_do_not_overlap_by_default(self):
        series = make_series([0.0, 0.1, 0.3, 0.2, 0.6])
        np.testing.assert_allclose(log_returns(series, lag=2).values, [0.3, 0.3], atol=1e-14)
        np.testing.assert_allclose(
            log_returns(series, lag=2, overlapping=True).values, [0.3, 0.1, 0.3], atol=1e-14
        )

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            log_returns(make_series([0.0, 0.1]), lag=2)
        with pytest.raises(HistoryError):
            log_returns(make_series([0.0, 0.1]), lag=0)

    def test_laplace_prices(self):
        returns = log_returns(laplace_prices(LAPLACE_MU, 2001))
        assert returns.values.size == 2000
        assert np.std(returns.values) == pytest.approx(math.sqrt(2.0) / LAPLACE_MU, rel=0.1)

    def test_exact_log_prices(self):
        returns = log_returns(make_series([0.0, 1.0, 2.0]))
        np.testing.assert_allclose(returns.values, [1.0, 1.0], rtol=1e-15)
        flat = log_returns(make_series(np.zeros(10)))
        np.testing.assert_array_equal(flat.values, np.zeros(9))

    def test_gbm_sample_volatility(self):
        returns = log_returns(gbm_prices(0.01, 10001))
        assert returns.values.size == 10000
        standard_error = 0.01 / math.sqrt(2.0 * returns.values.size)
        assert np.std(returns.values, ddof=1) == pytest.approx(0.01, abs=3 * standard_error)


class TestTailFit:
    def test_empirical_ccdf_positions(self):
        xs, ccdf = empirical_ccdf(np.array([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(xs, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(ccdf, [0.75, 0.5, 0.25])

    def test_ccdf_bounds_and_order(self):
        values = laplace_returns(LAPLACE_MU, 1, 500).values
        _, ccdf = empirical_ccdf(values)
        assert np.all(np.diff(ccdf) < 0)
        assert ccdf[0] == pytest.approx(500 / 501)
        assert ccdf[-1] == pytest.approx(1 / 501)

    def test_exact_exponential_tail(self):
        returns = ReturnSeries(lag=1, values=exponential_sample(40.0, 2000))
        estimate = ccdf_tail_fit(returns, side=TailSide.RIGHT)
        assert estimate.mu == pytest.approx(40.0, rel=1e-10)
        assert estimate.rms_residual <= 1e-10
        assert estimate.points >= 8

    def test_mirrored_left_tail(self):
        returns = ReturnSeries(lag=1, values=-exponential_sample(25.0, 2000))
        assert ccdf_tail_fit(returns, side=TailSide.LEFT).mu == pytest.approx(25.0, rel=1e-10)

    def test_two_sided_average(self):
        returns = laplace_returns(LAPLACE_MU, 1, 20000)
        right = ccdf_tail_fit(returns, side=TailSide.RIGHT).mu
        left = ccdf_tail_fit(returns, side=TailSide.LEFT).mu
        both = ccdf_tail_fit(returns)
        assert both.mu == pytest.approx(0.5 * (right + left), rel=1e-14)
        assert both.window.side == TailSide.BOTH
        assert both.mu == pytest.approx(LAPLACE_MU, rel=0.05)

    def test_degenerate_returns(self):
        with pytest.raises(DegenerateSpreadError):
            ccdf_tail_fit(ReturnSeries(lag=1, values=np.zeros(500)))

    def test_insufficient_returns(self):
        with pytest.raises(InsufficientDataError):
            ccdf_tail_fit(ReturnSeries(lag=1, values=np.linspace(0.0, 1.0, 20)))

    def test_bad_percentiles(self):
        returns = ReturnSeries(lag=1, values=exponential_sample(1.0, 500))
        with pytest.raises(HistoryError):
            ccdf_tail_fit(returns, lower_pct=99.0, upper_pct=85.0)


class TestScaling:
    def test_laplace_scaling_constant(self):
        groups = []
        for lag in (1, 10, 100):
            groups += subgroup_stats(laplace_returns(LAPLACE_MU, lag, 40000), group_size=10000)
        assert len(groups) == 12
        for s in groups:
            assert s.mu_H == pytest.approx(LAPLACE_MU / math.sqrt(s.lag), rel=0.15)
            assert 1.3 <= s.product <= 1.6
        fit = fit_scaling(groups)
        assert fit.count == 12
        assert fit.C1 == pytest.approx(math.sqrt(2.0), rel=0.05)
        assert fit.uncertainty < 0.05
        assert 1.3 <= fit.C1 <= 1.6
        assert lag_spread(groups) <= 0.1

    def test_one_laplace_group(self):
        groups = subgroup_stats(laplace_returns(LAPLACE_MU, 1, 600), group_size=600)
        assert len(groups) == 1
        assert groups[0].sigma_H == pytest.approx(math.sqrt(2.0) / LAPLACE_MU, rel=0.15)

    def test_two_groups_from_650_returns(self):
        groups = subgroup_stats(laplace_returns(LAPLACE_MU, 1, 650), group_size=300)
        assert [s.group_index for s in groups] == [0, 1]

    def test_grouping_is_deterministic(self):
        returns = laplace_returns(LAPLACE_MU, 1, 1000)
        first = subgroup_stats(returns, group_size=300)
        second = subgroup_stats(ReturnSeries(lag=1, values=returns.values.copy()), group_size=300)
        assert [s.model_dump() for s in first] == [s.model_dump() for s in second]

    @pytest.mark.parametrize("k", [4.0, 0.37, 25.0])
    def test_rescaled_returns(self, k):
        returns = laplace_returns(LAPLACE_MU, 1, 900)
        base = subgroup_stats(returns, group_size=300)
        scaled = subgroup_stats(ReturnSeries(lag=1, values=k * returns.values), group_size=300)
        for b, s in zip(base, scaled):
            assert s.sigma_H == pytest.approx(k * b.sigma_H, rel=1e-12)
            assert s.mu_H == pytest.approx(b.mu_H / k, rel=1e-12)
            assert s.product == pytest.approx(b.product, rel=1e-12)

    def test_gbm_walk_product_is_lag_independent(self):
        # lagged sums of Gaussian steps stay Gaussian
        prices = gbm_prices(0.01, 500001)
        groups = []
        for lag in (1, 10, 100):
            groups += subgroup_stats(log_returns(prices, lag=lag), group_size=1000)
        assert {s.lag for s in groups} == {1.0, 10.0, 100.0}
        assert lag_spread(groups) <= 0.2

    def test_subgroups_drop_remainder(self):
        groups = subgroup_stats(laplace_returns(LAPLACE_MU, 1, 1000), group_size=300)
        assert [s.group_index for s in groups] == [0, 1, 2]
        assert all(s.subgroup_size == 300 and s.lag == 1.0 for s in groups)

    def test_subgroup_size_limits(self):
        returns = laplace_returns(LAPLACE_MU, 1, 1000)
        with pytest.raises(HistoryError):
            subgroup_stats(returns, group_size=100)
        with pytest.raises(InsufficientDataError):
            subgroup_stats(returns, group_size=2000)

    def test_exact_products(self):
        fit = fit_scaling([stats(2.0, sigma=s) for s in (0.01, 0.02, 0.05)])
        assert fit.C1 == pytest.approx(2.0, rel=1e-14)
        assert fit.uncertainty == pytest.approx(0.0, abs=1e-14)
        assert fit.spread == pytest.approx(0.0, abs=1e-14)

    def test_geometric_mean(self):
        fit = fit_scaling([stats(1.0), stats(2.0), stats(4.0)])
        assert fit.C1 == pytest.approx(2.0, rel=1e-14)
        assert fit.spread == pytest.approx(3.0 / (7.0 / 3.0), rel=1e-14)

    def test_too_few_stats(self):
        with pytest.raises(InsufficientDataError):
            fit_scaling([stats(1.0), stats(1.1)])

    def test_lag_spread(self):
        entries = [stats(1.0, lag=1), stats(1.2, lag=1), stats(1.3, lag=10), stats(1.3, lag=10)]
        assert lag_spread(entries) == pytest.approx(0.2 / 1.2, rel=1e-12)
        with pytest.raises(InsufficientDataError):
            lag_spread([])

    def test_pooled_stats(self):
        pooled = HistoricalStats.pooled([stats(1.0, sigma=0.01), stats(1.0, sigma=0.03)])
        assert pooled.sigma_H == pytest.approx(0.02)
        assert pooled.subgroup_size == 600
        with pytest.raises(ValueError):
            HistoricalStats.pooled([stats(1.0, lag=1), stats(1.0, lag=2)])
