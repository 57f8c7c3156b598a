"""
The parametric volatility smile, its analytic derivatives and parameter checks.

sigma(x) = g * [1 + (chi - 1) * u^2 / (u^2 + n)],  u = x + g^2 T / 2
"""

import logging
import math
from typing import Union

import numpy as np

from app.core.models import SmileParams, SmileShapeReport, ValidationResult, Violation

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Parameter ranges covered by the calibrated FX data set.
TABLE_BOUNDS = {
    "g": (0.03, 0.5),
    "rho": (2.5, 10.0),
    "T": (1.0 / 365.0, 1080.0 / 365.0),
    "chi": (1.01, 3.0),
}

# Empirical width scaling sqrt(n) = c g sqrt(T).
WIDTH_SCALING_C = 2.65

_FAR_FACTOR = 1e6


class SmileParamsError(ValueError):
    """Invalid smile parameters."""
    pass


def _u(p: SmileParams, x: ArrayLike) -> np.ndarray:
    return np.asarray(x, dtype=float) + 0.5 * p.g * p.g * p.T


def _saturation(p: SmileParams, u: np.ndarray) -> np.ndarray:
    """u^2/(u^2+n), switching to 1/(1+n/u^2) far from the minimum."""
    u2 = u * u
    far = np.abs(u) > math.sqrt(p.n) * _FAR_FACTOR
    with np.errstate(divide="ignore", invalid="ignore"):
        near_value = u2 / (u2 + p.n)
        far_value = 1.0 / (1.0 + p.n / np.where(far, u2, 1.0))
    return np.where(far, far_value, near_value)


def _as_output(value: np.ndarray, x: ArrayLike) -> ArrayLike:
    return float(value) if np.ndim(x) == 0 else value


def smile_sigma(p: SmileParams, x: ArrayLike) -> ArrayLike:
    """
    Evaluate the smile at log-return coordinate(s) x.

    Args:
        p: Smile parameters
        x: Scalar or array of moneyness values

    Returns:
        Implied volatility, bounded in [g, g*chi]
    """
    u = _u(p, x)
    value = p.g * (1.0 + (p.chi - 1.0) * _saturation(p, u))
    return _as_output(value, x)


def smile_sigma_d1(p: SmileParams, x: ArrayLike) -> ArrayLike:
    """First derivative 2 g (chi-1) n u / (u^2+n)^2."""
    u = _u(p, x)
    denom = u * u + p.n
    value = 2.0 * p.g * (p.chi - 1.0) * p.n * u / (denom * denom)
    return _as_output(value, x)


def smile_sigma_d2(p: SmileParams, x: ArrayLike) -> ArrayLike:
    """Second derivative 2 g (chi-1) n (n - 3u^2) / (u^2+n)^3."""
    u = _u(p, x)
    denom = u * u + p.n
    value = 2.0 * p.g * (p.chi - 1.0) * p.n * (p.n - 3.0 * u * u) / (denom * denom * denom)
    return _as_output(value, x)


def smile_jacobian(p: SmileParams, x: ArrayLike) -> np.ndarray:
    """
    Partial derivatives of sigma with respect to (g, chi, n).

    Returns:
        Array of shape (len(x), 3)
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    u = _u(p, xs)
    denom = u * u + p.n
    q = _saturation(p, u)
    d_sigma_dx = 2.0 * p.g * (p.chi - 1.0) * p.n * u / (denom * denom)
    d_g = 1.0 + (p.chi - 1.0) * q + d_sigma_dx * p.g * p.T
    d_chi = p.g * q
    d_n = -p.g * (p.chi - 1.0) * u * u / (denom * denom)
    return np.column_stack([d_g, d_chi, d_n])


def shape_report(p: SmileParams) -> SmileShapeReport:
    """Derived shape quantities: minimum location, height, half width, rho, implied c."""
    half_width = math.sqrt(p.n)
    return SmileShapeReport(
        x_min=p.x_min,
        height=p.g * (p.chi - 1.0),
        half_width=half_width,
        rho=p.rho,
        c_implied=half_width / p.scale,
    )


def validate_params(p: SmileParams, table_bounds: bool = False) -> ValidationResult:
    """
    Check type invariants and, optionally, the calibrated parameter ranges.

    Never raises; every failed check becomes a ``Violation``.
    """
    violations = []
    for field in ("g", "n", "T"):
        value = getattr(p, field)
        if not value > 0:
            violations.append(
                Violation(field=field, kind="invariant", message=f"{field} must be positive, got {value}")
            )
    if not p.chi >= 1.0:
        violations.append(
            Violation(field="chi", kind="invariant", message=f"chi must be >= 1, got {p.chi}")
        )

    if table_bounds:
        values = {"g": p.g, "chi": p.chi, "T": p.T}
        if p.g > 0 and p.T > 0:
            values["rho"] = p.rho
        for field, (lo, hi) in TABLE_BOUNDS.items():
            if field not in values:
                continue
            value = values[field]
            # relative slack so that bounds computed through n = rho g^2 T still pass
            slack = 1e-12 * max(abs(lo), abs(hi))
            if value < lo - slack:
                violations.append(
                    Violation(field=field, kind="table_bounds", message=f"{field} below table min {lo:g}")
                )
            elif value > hi + slack:
                violations.append(
                    Violation(field=field, kind="table_bounds", message=f"{field} above table max {hi:g}")
                )

    if violations:
        logger.debug(f"parameter validation found {len(violations)} violation(s)")
    return ValidationResult(violations=violations)


def require_valid(p: SmileParams) -> SmileParams:
    """Raise ``SmileParamsError`` when a type invariant is violated."""
    result = validate_params(p)
    if not result.valid:
        raise SmileParamsError("; ".join(v.message for v in result.violations))
    return p
