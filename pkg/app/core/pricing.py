"""
Black-Scholes pricing, delta, the delta <-> moneyness transform and implied volatility.
"""

import logging
import math
from typing import Tuple

import numpy as np
from scipy.special import erf, erfinv, ndtr, ndtri

from app.core.models import DeltaConvention, MarketContext, Moneyness

logger = logging.getLogger(__name__)

IV_BRACKET = (1e-6, 10.0)
IV_MAX_ITERATIONS = 100
IV_PRICE_TOLERANCE = 1e-10
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class PricingError(Exception):
    """Pricing error."""
    pass


class PricingDomainError(PricingError, ValueError):
    """Argument outside the domain of a pricing formula."""
    pass


class NoSolutionError(PricingError):
    """Observed price admits no implied volatility."""
    pass


class ImpliedVolConvergenceError(PricingError):
    """Implied-volatility iteration did not converge."""

    def __init__(self, message: str, bracket: Tuple[float, float]):
        super().__init__(message)
        self.bracket = bracket


def _check_inputs(strike: float, sigma: float) -> None:
    if not sigma > 0:
        raise PricingDomainError(f"volatility must be positive, got {sigma}")
    if not strike >= 0:
        raise PricingDomainError(f"strike must be non-negative, got {strike}")


def _d1(ctx: MarketContext, strike: float, sigma: float) -> float:
    if strike == 0:
        return math.inf
    vol_sqrt_t = sigma * math.sqrt(ctx.T)
    return (math.log(ctx.S0 / strike) + (ctx.r + 0.5 * sigma * sigma) * ctx.T) / vol_sqrt_t


def bs_call_price(ctx: MarketContext, strike: float, sigma: float) -> float:
    """
    Price a European call with the Black-Scholes formula.

    Args:
        ctx: Spot, rate and maturity
        strike: Strike price (>= 0)
        sigma: Annual volatility (> 0)

    Returns:
        S0*N(d1) - K*exp(-rT)*N(d2)

    Raises:
        PricingDomainError: If sigma <= 0 or strike < 0
    """
    _check_inputs(strike, sigma)
    if strike == 0:
        return ctx.S0
    d1 = _d1(ctx, strike, sigma)
    d2 = d1 - sigma * math.sqrt(ctx.T)
    discounted = strike * math.exp(-ctx.r * ctx.T)
    price = ctx.S0 * float(ndtr(d1)) - discounted * float(ndtr(d2))
    # clamp rounding noise into the no-arbitrage band
    return min(max(price, max(ctx.S0 - discounted, 0.0)), ctx.S0)


def bs_vega(ctx: MarketContext, strike: float, sigma: float) -> float:
    """Sensitivity of the call price to sigma, S0*phi(d1)*sqrt(T)."""
    _check_inputs(strike, sigma)
    if strike == 0:
        return 0.0
    d1 = _d1(ctx, strike, sigma)
    return ctx.S0 * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi) * math.sqrt(ctx.T)


def bs_delta(
    ctx: MarketContext,
    strike: float,
    sigma: float,
    conv: DeltaConvention = DeltaConvention.ERF,
) -> float:
    """
    Delta of a call under the chosen convention.

    The erf convention returns erf(d1) in (-1, 1); the market convention
    returns N(d1) in (0, 1).
    """
    _check_inputs(strike, sigma)
    d1 = _d1(ctx, strike, sigma)
    if conv == DeltaConvention.ERF:
        return float(erf(d1))
    return float(ndtr(d1))


def _refined_erfinv(y: float) -> float:
    # rational initial value from scipy, then one Newton polish on erf
    x = float(erfinv(y))
    if math.isfinite(x):
        x -= (float(erf(x)) - y) / (_TWO_OVER_SQRT_PI * math.exp(-x * x))
    return x


def delta_to_x(
    delta: float,
    sigma: float,
    T: float,
    conv: DeltaConvention = DeltaConvention.ERF,
) -> Moneyness:
    """
    Invert a quoted delta into the log-return coordinate x.

    Args:
        delta: Quoted delta
        sigma: Implied volatility of the quote
        T: Maturity in years
        conv: Delta convention of the quote

    Returns:
        x = sigma^2 T/2 - sigma sqrt(T) * d1(delta)

    Raises:
        PricingDomainError: If delta lies outside the open range of the convention
    """
    if not sigma > 0 or not T > 0:
        raise PricingDomainError(f"sigma and T must be positive, got sigma={sigma} T={T}")
    if conv == DeltaConvention.ERF:
        if not -1.0 < delta < 1.0:
            raise PricingDomainError(f"erf delta must lie in (-1, 1), got {delta}")
        d1 = _refined_erfinv(delta)
    else:
        if not 0.0 < delta < 1.0:
            raise PricingDomainError(f"N(d1) delta must lie in (0, 1), got {delta}")
        d1 = float(ndtri(delta))
    return 0.5 * sigma * sigma * T - sigma * math.sqrt(T) * d1


def x_to_strike(ctx: MarketContext, x: Moneyness) -> float:
    """Strike whose log-return coordinate is x."""
    return ctx.S0 * math.exp(x + ctx.r * ctx.T)


def strike_to_x(ctx: MarketContext, strike: float) -> Moneyness:
    """Log-return coordinate ln(K/S0) - rT of a strike."""
    if not strike > 0:
        raise PricingDomainError(f"strike must be positive, got {strike}")
    return math.log(strike / ctx.S0) - ctx.r * ctx.T


def no_arbitrage_band(ctx: MarketContext, strike: float) -> Tuple[float, float]:
    """Lower and upper price bounds of a call."""
    return max(ctx.S0 - strike * math.exp(-ctx.r * ctx.T), 0.0), ctx.S0


def implied_vol(ctx: MarketContext, strike: float, observed_price: float) -> float:
    """
    Solve bs_call_price(sigma) = observed_price.

    Safeguarded Newton iteration on the bracket [1e-6, 10] with a bisection
    fallback whenever the Newton step leaves the bracket.

    Args:
        ctx: Spot, rate and maturity
        strike: Strike price
        observed_price: Market price of the call

    Returns:
        Implied volatility

    Raises:
        NoSolutionError: If the price is outside the no-arbitrage band
        ImpliedVolConvergenceError: If the iteration cap is reached
    """
    if not strike >= 0:
        raise PricingDomainError(f"strike must be non-negative, got {strike}")
    lower, upper = no_arbitrage_band(ctx, strike)
    if not lower < observed_price < upper:
        raise NoSolutionError(
            f"price {observed_price} outside the no-arbitrage band ({lower}, {upper})"
        )

    tolerance = IV_PRICE_TOLERANCE * ctx.S0
    lo, hi = IV_BRACKET
    if bs_call_price(ctx, strike, lo) > observed_price or bs_call_price(ctx, strike, hi) < observed_price:
        raise NoSolutionError(
            f"price {observed_price} not attainable for sigma in [{lo}, {hi}]"
        )

    sigma = min(max(0.2, lo), hi)
    for iteration in range(IV_MAX_ITERATIONS):
        diff = bs_call_price(ctx, strike, sigma) - observed_price
        vega = bs_vega(ctx, strike, sigma)
        if abs(diff) <= tolerance:
            # one extra Newton polish while it stays inside the bracket
            if vega > 0:
                polished = sigma - diff / vega
                if lo < polished < hi:
                    sigma = polished
            logger.debug(f"implied vol converged after {iteration + 1} iterations: {sigma}")
            return sigma
        if diff > 0:
            hi = sigma
        else:
            lo = sigma
        step = sigma - diff / vega if vega > 0 else math.nan
        sigma = step if lo < step < hi else 0.5 * (lo + hi)

    logger.error(f"implied vol did not converge for strike {strike}, bracket [{lo}, {hi}]")
    raise ImpliedVolConvergenceError(
        f"implied volatility did not converge in {IV_MAX_ITERATIONS} iterations", (lo, hi)
    )


def bs_call_prices(ctx: MarketContext, strikes: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Vectorised call prices for positive strikes."""
    strikes = np.asarray(strikes, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0) or np.any(strikes <= 0):
        raise PricingDomainError("vectorised pricing requires positive strikes and volatilities")
    vol_sqrt_t = sigmas * math.sqrt(ctx.T)
    d1 = (np.log(ctx.S0 / strikes) + (ctx.r + 0.5 * sigmas ** 2) * ctx.T) / vol_sqrt_t
    d2 = d1 - vol_sqrt_t
    return ctx.S0 * ndtr(d1) - strikes * math.exp(-ctx.r * ctx.T) * ndtr(d2)
