"""
Deterministic synthetic data sets: smile quotes, historical stats and price series.
"""

import logging
import math
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.core.file_io import write_price_csv, write_quotes_csv, write_stats_csv
from app.core.models import (
    DeltaConvention,
    HistoricalStats,
    PriceSeries,
    ReturnSeries,
    SmileParams,
    VolQuote,
    years_to_days,
)
from app.core.smile import smile_sigma
from app.core.tails import f_of_rho

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20100104

# Smile fitted to a one-day FX quote set.
ONE_DAY_PARAMS = SmileParams(g=0.1758, chi=1.20, n=0.00030, T=1.0 / 365.0)

HIGH_CHI_PARAMS = SmileParams.from_rho(g=0.1, chi=2.5, rho=6.0, T=30.0 / 365.0)
HIGH_CHI_CONDITIONAL = 1.3

LAPLACE_MU = 100.0
LAPLACE_COUNT = 20001


def quote_abscissae(p: SmileParams, count: int = 11, widths: float = 3.0) -> np.ndarray:
    """Evenly spaced x covering x_min +- widths * sqrt(n)."""
    half = widths * math.sqrt(p.n)
    return np.linspace(p.x_min - half, p.x_min + half, count)


def synthetic_quotes(
    p: SmileParams, count: int = 11, noise: float = 0.0, seed: int = DEFAULT_SEED
) -> List[VolQuote]:
    """Quotes read off the smile, optionally with uniform noise of half-width ``noise``."""
    xs = quote_abscissae(p, count)
    sigmas = np.asarray(smile_sigma(p, xs))
    if noise > 0:
        sigmas = sigmas + np.random.default_rng(seed).uniform(-noise, noise, xs.size)
    return [VolQuote(x=float(x), sigma=float(s)) for x, s in zip(xs, sigmas)]


def flat_quotes(sigma: float = 0.1, T: float = 1.0 / 365.0, count: int = 11) -> List[VolQuote]:
    p = SmileParams(g=sigma, chi=1.0, n=(2.65 * sigma * math.sqrt(T)) ** 2, T=T)
    return [VolQuote(x=float(x), sigma=sigma) for x in quote_abscissae(p, count)]


def stats_for_chi(p: SmileParams, chi: float, label: str = "synthetic") -> HistoricalStats:
    """
    Historical stats at lag T whose constraint yields ``chi`` for the smile width of p.

    sigma_H is set to the flat-smile per-lag volatility g sqrt(T).
    """
    sigma_H = p.g * math.sqrt(p.T)
    mu_H = 2.0 * f_of_rho(p.rho) / (chi * sigma_H)
    return HistoricalStats(
        sigma_H=sigma_H, mu_H=mu_H, subgroup_size=300, lag=years_to_days(p.T), label=label
    )


def constraint_fixture() -> Tuple[List[VolQuote], float, HistoricalStats]:
    """One-day smile quotes with stats that already satisfy the conditional constraint."""
    p = ONE_DAY_PARAMS
    return synthetic_quotes(p), p.T, stats_for_chi(p, p.chi, label="one_day")


def high_chi_fixture() -> Tuple[List[VolQuote], float, HistoricalStats]:
    """Steep smile quotes with stats implying a much flatter conditional smile."""
    p = HIGH_CHI_PARAMS
    return synthetic_quotes(p, count=15), p.T, stats_for_chi(p, HIGH_CHI_CONDITIONAL, label="high_chi")


def _calendar(count: int, start: date = date(2001, 1, 2)) -> List[date]:
    return [start + timedelta(days=i) for i in range(count)]


def laplace_prices(mu: float, count: int, seed: int = DEFAULT_SEED, label: str = "laplace") -> PriceSeries:
    """Price path whose daily log-increments are Laplace with decay rate mu."""
    rng = np.random.default_rng(seed)
    steps = rng.laplace(0.0, 1.0 / mu, count - 1)
    closes = np.exp(np.concatenate(([0.0], np.cumsum(steps))))
    return PriceSeries(label=label, timestamps=_calendar(count), closes=closes)


def gbm_prices(sigma: float, count: int, seed: int = DEFAULT_SEED, label: str = "gbm") -> PriceSeries:
    """Geometric Brownian path with daily volatility sigma and zero drift."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(-0.5 * sigma * sigma, sigma, count - 1)
    closes = np.exp(np.concatenate(([0.0], np.cumsum(steps))))
    return PriceSeries(label=label, timestamps=_calendar(count), closes=closes)


def laplace_returns(mu: float, lag: int, count: int, seed: int = DEFAULT_SEED) -> ReturnSeries:
    """Independent lag returns, Laplace with decay rate mu / sqrt(lag)."""
    rng = np.random.default_rng(seed + lag)
    values = rng.laplace(0.0, math.sqrt(lag) / mu, count)
    return ReturnSeries(lag=lag, values=values, label=f"laplace_lag{lag}")


def write_bundle(directory: Union[str, Path], seed: int = DEFAULT_SEED) -> Dict[str, Path]:
    """
    Write the bundled fixture files into ``directory``.

    Returns:
        Mapping of fixture name to written path
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "one_day_quotes": out / "one_day_quotes.csv",
        "flat_quotes": out / "flat_quotes.csv",
        "high_chi_quotes": out / "high_chi_quotes.csv",
        "high_chi_stats": out / "high_chi_stats.csv",
        "laplace_prices": out / "laplace_prices.csv",
    }
    write_quotes_csv(paths["one_day_quotes"], synthetic_quotes(ONE_DAY_PARAMS), 1, DeltaConvention.ERF)
    write_quotes_csv(paths["flat_quotes"], flat_quotes(), 1, DeltaConvention.ERF)
    quotes, T, hist = high_chi_fixture()
    write_quotes_csv(paths["high_chi_quotes"], quotes, years_to_days(T), DeltaConvention.ERF)
    write_stats_csv(paths["high_chi_stats"], [hist])
    write_price_csv(paths["laplace_prices"], laplace_prices(LAPLACE_MU, LAPLACE_COUNT, seed))
    logger.info(f"wrote {len(paths)} fixture files to {out}")
    return paths
