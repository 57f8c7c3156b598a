"""
Smile-implied density of returns, its CCDF, diagnostics and value-at-risk.

P(x) = exp(-(x + sigma^2 T/2)^2 / (2 sigma^2 T)) / sqrt(2 pi sigma^2 T) * F(x)
F(x) = (1 - x sigma'/sigma)^2 - (sigma' sigma T)^2 / 4 + sigma sigma'' T
with sigma = sigma(x) taken from the smile.
"""

import logging
import math
from typing import Callable, List, Tuple, Union

import numpy as np
from scipy.integrate import quad
from scipy.optimize import bisect
from scipy.special import ndtr

from app.core.models import DensityGrid, MarketContext, SmileParams, VarResult
from app.core.pricing import bs_call_prices
from app.core.smile import require_valid, smile_sigma, smile_sigma_d1, smile_sigma_d2

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

TRUNCATION_WIDTHS = 12.0
QUAD_ABS_TOL = 1e-9
QUAD_LIMIT = 200
VAR_MAX_ITERATIONS = 200
VAR_SCAN_POINTS = 4001
DEFAULT_VAR_LEVEL = 0.01
MIN_GRID_POINTS = 16


class DensityError(Exception):
    """Implied density error."""
    pass


class QuadratureError(DensityError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


class NegativeDensityError(DensityError):
    """Negative implied density inside a region that must be integrated."""

    def __init__(self, message: str, x_range: Tuple[float, float]):
        super().__init__(message)
        self.x_range = x_range


class VarDomainError(DensityError, ValueError):
    """VaR level outside (0, 0.5]."""
    pass


def perturbation_factor(p: SmileParams, x: ArrayLike) -> ArrayLike:
    """
    Multiplicative correction F to the Gaussian kernel.

    Equals 1 identically for a flat smile; negative values are returned as-is.
    """
    sigma = np.asarray(smile_sigma(p, x))
    d1 = np.asarray(smile_sigma_d1(p, x))
    d2 = np.asarray(smile_sigma_d2(p, x))
    xs = np.asarray(x, dtype=float)
    value = (1.0 - d1 / sigma * xs) ** 2 - (d1 * sigma * p.T) ** 2 / 4.0 + sigma * d2 * p.T
    return float(value) if np.ndim(x) == 0 else value


def implied_pdf(p: SmileParams, x: ArrayLike) -> ArrayLike:
    """
    Implied density of the log-return coordinate x.

    Args:
        p: Smile parameters
        x: Scalar or array of moneyness values

    Returns:
        Density values; negative where F < 0
    """
    sigma = np.asarray(smile_sigma(p, x))
    xs = np.asarray(x, dtype=float)
    var = sigma * sigma * p.T
    kernel = np.exp(-((xs + 0.5 * var) ** 2) / (2.0 * var)) / np.sqrt(2.0 * math.pi * var)
    value = kernel * np.asarray(perturbation_factor(p, x))
    return float(value) if np.ndim(x) == 0 else value


def _scalar_pdf(p: SmileParams) -> Callable[[float], float]:
    """Scalar version of ``implied_pdf`` for the quadrature loops."""
    g, a, n, T = p.g, p.chi - 1.0, p.n, p.T
    half = 0.5 * g * g * T
    norm = math.sqrt(2.0 * math.pi)

    def pdf(x: float) -> float:
        u = x + half
        u2 = u * u
        d = u2 + n
        sigma = g * (1.0 + a * u2 / d)
        s1 = 2.0 * g * a * n * u / (d * d)
        s2 = 2.0 * g * a * n * (n - 3.0 * u2) / (d * d * d)
        factor = (1.0 - s1 / sigma * x) ** 2 - (s1 * sigma * T) ** 2 / 4.0 + sigma * s2 * T
        var = sigma * sigma * T
        z = x + 0.5 * var
        return math.exp(-z * z / (2.0 * var)) / (norm * math.sqrt(var)) * factor

    return pdf


def _truncation(p: SmileParams) -> Tuple[float, float]:
    width = TRUNCATION_WIDTHS * p.g * p.chi * math.sqrt(p.T)
    return p.x_min - width, p.x_min + width


def _gaussian_envelope(p: SmileParams) -> Tuple[float, float]:
    sigma_max = p.g * p.chi
    return -0.5 * sigma_max * sigma_max * p.T, sigma_max * math.sqrt(p.T)


def _integrate(pdf: Callable[[float], float], a: float, b: float, points: List[float]) -> Tuple[float, float]:
    if b <= a:
        return 0.0, 0.0
    inner = [pt for pt in points if a < pt < b]
    result = quad(
        pdf, a, b,
        epsabs=QUAD_ABS_TOL * 1e-2, epsrel=1e-12, limit=QUAD_LIMIT,
        points=inner or None, full_output=1,
    )
    value, abserr = result[0], result[1]
    if abserr > QUAD_ABS_TOL:
        logger.error(f"quadrature on [{a}, {b}] reached only {abserr:.3e}")
        raise QuadratureError(
            f"quadrature on [{a:.6g}, {b:.6g}] did not converge (error {abserr:.3e})", abserr
        )
    return float(value), float(abserr)


def _left_mass(p: SmileParams, x: float, pdf: Callable[[float], float]) -> Tuple[float, float]:
    """Integral of the density over (-inf, x]."""
    lo, _ = _truncation(p)
    mean, sd = _gaussian_envelope(p)
    if x <= lo:
        return float(ndtr((x - mean) / sd)), 0.0
    closure = float(ndtr((lo - mean) / sd))
    value, err = _integrate(pdf, lo, x, [p.x_min])
    return closure + value, err


def _right_mass(p: SmileParams, x: float, pdf: Callable[[float], float]) -> Tuple[float, float]:
    """Integral of the density over [x, +inf)."""
    _, hi = _truncation(p)
    mean, sd = _gaussian_envelope(p)
    if x >= hi:
        return float(ndtr(-(x - mean) / sd)), 0.0
    closure = float(ndtr(-(hi - mean) / sd))
    value, err = _integrate(pdf, x, hi, [p.x_min])
    return closure + value, err


def implied_ccdf(p: SmileParams, x: float) -> float:
    """
    Probability that the return exceeds x.

    Left of the smile minimum this is 1 minus the integral from -inf to x;
    right of it the tail integral from x to +inf is used directly so that small
    tail probabilities keep their relative accuracy.

    Raises:
        QuadratureError: If the adaptive quadrature does not converge
    """
    require_valid(p)
    pdf = _scalar_pdf(p)
    if x <= p.x_min:
        mass, _ = _left_mass(p, x, pdf)
        return 1.0 - mass
    mass, _ = _right_mass(p, x, pdf)
    return mass


def total_mass(p: SmileParams) -> float:
    """Integral of the implied density over the whole line."""
    require_valid(p)
    pdf = _scalar_pdf(p)
    left, _ = _left_mass(p, p.x_min, pdf)
    right, _ = _right_mass(p, p.x_min, pdf)
    return left + right


def density_grid(p: SmileParams, x_lo: float, x_hi: float, n_points: int = 512) -> DensityGrid:
    """
    Tabulate PDF, CCDF and diagnostics on a uniform grid.

    Args:
        p: Smile parameters
        x_lo: First grid abscissa
        x_hi: Last grid abscissa
        n_points: Number of grid points (>= 16)

    Returns:
        DensityGrid with norm_defect = |1 - integral of the pdf over [x_lo, x_hi]|
    """
    require_valid(p)
    if not x_lo < x_hi:
        raise DensityError(f"grid requires x_lo < x_hi, got [{x_lo}, {x_hi}]")
    if n_points < MIN_GRID_POINTS:
        raise DensityError(f"grid requires at least {MIN_GRID_POINTS} points, got {n_points}")

    xs = np.linspace(x_lo, x_hi, n_points)
    pdf_values = np.asarray(implied_pdf(p, xs))
    negative_mask = np.asarray(perturbation_factor(p, xs)) < 0

    scalar = _scalar_pdf(p)
    segments = np.array(
        [_integrate(scalar, xs[i], xs[i + 1], [p.x_min])[0] for i in range(n_points - 1)]
    )
    left0, _ = _left_mass(p, float(xs[0]), scalar)
    right_last, _ = _right_mass(p, float(xs[-1]), scalar)

    from_left = 1.0 - (left0 + np.concatenate(([0.0], np.cumsum(segments))))
    from_right = right_last + np.concatenate((np.cumsum(segments[::-1])[::-1], [0.0]))
    ccdf = np.where(xs <= p.x_min, from_left, from_right)

    norm_defect = abs(1.0 - float(np.sum(segments)))
    if negative_mask.any():
        logger.warning(
            f"implied density negative at {int(negative_mask.sum())} of {n_points} grid points"
        )
    logger.debug(f"density grid on [{x_lo:.6g}, {x_hi:.6g}] norm_defect={norm_defect:.3e}")
    return DensityGrid(
        xs=xs, pdf=pdf_values, ccdf=ccdf, norm_defect=norm_defect, negative_mask=negative_mask
    )


def default_grid(p: SmileParams, width: float = 10.0, n_points: int = 512) -> DensityGrid:
    """Grid of +-width * g sqrt(T) around the smile minimum."""
    half = width * p.scale
    return density_grid(p, p.x_min - half, p.x_min + half, n_points)


def value_at_risk(p: SmileParams, level: float = DEFAULT_VAR_LEVEL) -> VarResult:
    """
    Loss threshold Lambda with P(return <= -Lambda) = level.

    Args:
        p: Smile parameters
        level: Tail probability in (0, 0.5]

    Returns:
        VarResult with the threshold and the quadrature error of the last evaluation

    Raises:
        VarDomainError: If level is outside (0, 0.5]
        NegativeDensityError: If the density is negative inside the search bracket
    """
    if not 0.0 < level <= 0.5:
        raise VarDomainError(f"VaR level must lie in (0, 0.5], got {level}")
    require_valid(p)

    lam_hi = TRUNCATION_WIDTHS * p.g * p.chi * math.sqrt(p.T) + 0.5 * (p.g * p.chi) ** 2 * p.T
    scan = np.linspace(-lam_hi, 0.0, VAR_SCAN_POINTS)
    negative = np.asarray(implied_pdf(p, scan)) < 0
    if negative.any():
        bad = scan[negative]
        x_range = (float(bad.min()), float(bad.max()))
        logger.error(f"negative implied density on [{x_range[0]:.6g}, {x_range[1]:.6g}]")
        raise NegativeDensityError(
            f"implied density is negative for x in [{x_range[0]:.6g}, {x_range[1]:.6g}]; "
            "VaR is not defined for this smile",
            x_range,
        )

    pdf = _scalar_pdf(p)

    def excess(lam: float) -> float:
        return _left_mass(p, -lam, pdf)[0] - level

    if excess(0.0) < 0 or excess(lam_hi) > 0:
        raise DensityError(f"VaR level {level} is not bracketed by [0, {lam_hi:.6g}]")
    try:
        lam = bisect(excess, 0.0, lam_hi, xtol=1e-15, maxiter=VAR_MAX_ITERATIONS)
    except RuntimeError as e:
        raise DensityError(f"VaR root search failed: {e}") from e
    _, err = _left_mass(p, -lam, pdf)
    logger.info(f"VaR at level {level:g}: {lam:.6g}")
    return VarResult(lam=float(lam), level=level, quadrature_error=err)


def interior_minima(p: SmileParams, lo: float, hi: float, n_points: int = 801) -> List[float]:
    """Abscissae of strict local minima of the implied density inside (lo, hi)."""
    xs = np.linspace(lo, hi, n_points)
    values = np.asarray(implied_pdf(p, xs))
    inner = (values[1:-1] < values[:-2]) & (values[1:-1] < values[2:])
    return [float(x) for x in xs[1:-1][inner]]


def bl_density(p: SmileParams, ctx: MarketContext, xs: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """
    Density of x from second strike differences of smile-priced calls.

    e^{rT} d2C/dK2 gives the density of the terminal price; multiplying by K
    maps it to the log-return coordinate.
    """
    xs = np.asarray(xs, dtype=float)
    strikes = ctx.S0 * np.exp(xs + ctx.r * ctx.T)
    step = rel_step * strikes

    def call(k: np.ndarray) -> np.ndarray:
        moneyness = np.log(k / ctx.S0) - ctx.r * ctx.T
        return bs_call_prices(ctx, k, np.asarray(smile_sigma(p, moneyness)))

    second = (call(strikes + step) - 2.0 * call(strikes) + call(strikes - step)) / (step * step)
    return math.exp(ctx.r * ctx.T) * second * strikes
