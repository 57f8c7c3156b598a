"""
Historical return statistics: lagged log-returns, subgroup volatility and tail
decay, and the sigma_H = C1 / mu_H scaling.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.models import (
    FitWindow,
    HistoricalStats,
    PriceSeries,
    ReturnSeries,
    ScalingFit,
    TailEstimate,
    TailSide,
)
from app.core.tails import MIN_FIT_POINTS, semilog_fit

logger = logging.getLogger(__name__)

MIN_GROUP_SIZE = 300
MIN_TAIL_SAMPLE = 50
DEFAULT_LOWER_PCT = 85.0
DEFAULT_UPPER_PCT = 99.0


class HistoryError(Exception):
    """Historical statistics error."""
    pass


class DegenerateSpreadError(HistoryError):
    """Returns without spread; no decay can be estimated."""
    pass


class InsufficientDataError(HistoryError):
    """Not enough observations for the requested statistic."""
    pass


def log_returns(series: PriceSeries, lag: int = 1, overlapping: Optional[bool] = None) -> ReturnSeries:
    """
    Lagged log-returns ln(S[i+lag] / S[i]).

    Args:
        series: Price series
        lag: Lag in observations (days)
        overlapping: Start a return at every observation; defaults to True for
            lag 1 and False otherwise, where the start points stride by lag

    Raises:
        InsufficientDataError: If the series is shorter than lag + 1
    """
    if lag < 1:
        raise HistoryError(f"lag must be >= 1, got {lag}")
    if series.closes.size < lag + 1:
        raise InsufficientDataError(
            f"series '{series.label}' has {series.closes.size} closes, lag {lag} needs {lag + 1}"
        )
    if overlapping is None:
        overlapping = lag == 1

    logs = np.log(series.closes)
    if overlapping:
        values = logs[lag:] - logs[:-lag]
    else:
        values = np.diff(logs[::lag])
    logger.debug(f"{values.size} returns at lag {lag} from '{series.label}'")
    return ReturnSeries(lag=lag, values=values, label=series.label)


def empirical_ccdf(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted sample and plotting positions 1 - k/(N+1), k = 1..N."""
    ordered = np.sort(np.asarray(values, dtype=float))
    n = ordered.size
    return ordered, 1.0 - np.arange(1, n + 1) / (n + 1.0)


def _one_side_fit(values: np.ndarray, lower_pct: float, upper_pct: float, side: TailSide) -> TailEstimate:
    lo, hi = np.percentile(values, [lower_pct, upper_pct])
    if not hi > lo:
        raise DegenerateSpreadError(
            f"{side.value} tail window [{lo:.6g}, {hi:.6g}] is empty; returns have no spread there"
        )
    xs, ccdf = empirical_ccdf(values)
    mask = (xs >= lo) & (xs <= hi)
    if np.count_nonzero(mask) < MIN_FIT_POINTS:
        raise InsufficientDataError(
            f"{side.value} tail window holds {int(np.count_nonzero(mask))} points, "
            f"need at least {MIN_FIT_POINTS}"
        )
    # the left tail is fitted on mirrored returns, so both report decay in |x|
    return semilog_fit(xs[mask], np.log(ccdf[mask]), FitWindow(lo=lo, hi=hi, side=TailSide.RIGHT))


def ccdf_tail_fit(
    returns: ReturnSeries,
    lower_pct: float = DEFAULT_LOWER_PCT,
    upper_pct: float = DEFAULT_UPPER_PCT,
    side: TailSide = TailSide.BOTH,
) -> TailEstimate:
    """
    Exponential decay rate of the empirical return tails.

    The rank-based CCDF is fitted with a straight line in a semi-log plot
    between two percentiles; the left tail uses the mirrored sample and the
    two-sided estimate averages both decay rates.

    Args:
        returns: Return series (at least 50 values)
        lower_pct: Window start percentile
        upper_pct: Window end percentile
        side: Tail(s) to fit

    Returns:
        TailEstimate; for both sides the window is the right-tail window

    Raises:
        DegenerateSpreadError: If the returns have no spread
        InsufficientDataError: Fewer than 50 returns or 8 points in a window
    """
    values = np.asarray(returns.values, dtype=float)
    if values.size < MIN_TAIL_SAMPLE:
        raise InsufficientDataError(f"tail fit needs {MIN_TAIL_SAMPLE} returns, got {values.size}")
    if not np.ptp(values) > 0:
        raise DegenerateSpreadError("returns have zero spread; no tail decay can be estimated")
    if not 0.0 <= lower_pct < upper_pct <= 100.0:
        raise HistoryError(
            f"percentile window must satisfy 0 <= lower < upper <= 100, got ({lower_pct}, {upper_pct})"
        )

    fits: Dict[TailSide, TailEstimate] = {}
    if side in (TailSide.RIGHT, TailSide.BOTH):
        fits[TailSide.RIGHT] = _one_side_fit(values, lower_pct, upper_pct, TailSide.RIGHT)
    if side in (TailSide.LEFT, TailSide.BOTH):
        fits[TailSide.LEFT] = _one_side_fit(-values, lower_pct, upper_pct, TailSide.LEFT)

    if len(fits) == 1:
        return next(iter(fits.values()))
    right, left = fits[TailSide.RIGHT], fits[TailSide.LEFT]
    return TailEstimate(
        mu=0.5 * (right.mu + left.mu),
        intercept=0.5 * (right.intercept + left.intercept),
        rms_residual=math.sqrt(0.5 * (right.rms_residual ** 2 + left.rms_residual ** 2)),
        window=FitWindow(lo=right.window.lo, hi=right.window.hi, side=TailSide.BOTH),
        points=right.points + left.points,
    )


def subgroup_stats(
    returns: ReturnSeries,
    group_size: int = MIN_GROUP_SIZE,
    lower_pct: float = DEFAULT_LOWER_PCT,
    upper_pct: float = DEFAULT_UPPER_PCT,
    side: TailSide = TailSide.BOTH,
) -> List[HistoricalStats]:
    """
    Volatility and tail decay of consecutive disjoint subgroups.

    The trailing remainder shorter than group_size is dropped.

    Raises:
        InsufficientDataError: If fewer than group_size returns are available
    """
    if group_size < MIN_GROUP_SIZE:
        raise HistoryError(f"group_size must be >= {MIN_GROUP_SIZE}, got {group_size}")
    values = np.asarray(returns.values, dtype=float)
    count = values.size // group_size
    if count == 0:
        raise InsufficientDataError(
            f"{values.size} returns are fewer than one group of {group_size}"
        )
    if values.size % group_size:
        logger.debug(f"dropping {values.size % group_size} trailing returns")

    stats = []
    for index in range(count):
        group = values[index * group_size:(index + 1) * group_size]
        tail = ccdf_tail_fit(
            ReturnSeries(lag=returns.lag, values=group, label=returns.label),
            lower_pct=lower_pct,
            upper_pct=upper_pct,
            side=side,
        )
        sigma = float(np.std(group, ddof=1))
        if not sigma > 0 or not tail.mu > 0:
            raise DegenerateSpreadError(
                f"group {index} of '{returns.label}' gives sigma_H={sigma:.6g}, mu_H={tail.mu:.6g}"
            )
        stats.append(
            HistoricalStats(
                sigma_H=sigma,
                mu_H=tail.mu,
                subgroup_size=group_size,
                lag=float(returns.lag),
                label=returns.label,
                group_index=index,
                rms_residual=tail.rms_residual,
            )
        )
    logger.info(f"computed {len(stats)} subgroup stats for '{returns.label}' at lag {returns.lag}")
    return stats


def fit_scaling(stats: List[HistoricalStats]) -> ScalingFit:
    """
    Fit ln(mu_H) = -ln(sigma_H) + ln(C1) with the unit slope imposed.

    Returns:
        ScalingFit with C1, its standard error and the spread of the products

    Raises:
        InsufficientDataError: Fewer than 3 entries
    """
    if len(stats) < 3:
        raise InsufficientDataError(f"scaling fit needs at least 3 stats, got {len(stats)}")
    products = np.array([s.mu_H * s.sigma_H for s in stats])
    if not np.all(np.isfinite(products)) or np.any(products <= 0):
        raise HistoryError("scaling fit requires finite positive mu_H * sigma_H")

    logs = np.log(products)
    log_c1 = float(np.mean(logs))
    stderr = float(np.std(logs, ddof=1) / math.sqrt(logs.size))
    c1 = math.exp(log_c1)
    fit = ScalingFit(
        C1=c1,
        uncertainty=c1 * stderr,
        count=len(stats),
        spread=float((products.max() - products.min()) / products.mean()),
    )
    logger.info(f"scaling fit C1={fit.C1:.4f} +- {fit.uncertainty:.4f} from {fit.count} groups")
    return fit


def lag_spread(stats: List[HistoricalStats]) -> float:
    """(max - min) / mean of the per-lag mean products mu_H sigma_H."""
    by_lag: Dict[float, List[float]] = {}
    for s in stats:
        by_lag.setdefault(s.lag, []).append(s.product)
    if not by_lag:
        raise InsufficientDataError("no stats to compare across lags")
    means = np.array([np.mean(v) for _, v in sorted(by_lag.items())])
    return float((means.max() - means.min()) / means.mean())
