"""
Least-squares smile calibration.

Unconditional fits free (g, chi, n). Conditional fits free (g, n) and pin chi
to the historical tail decay through chi = 2 f(rho) / (mu_H sigma_H).
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from app.core.density import DensityError, default_grid, interior_minima, value_at_risk
from app.core.models import (
    ComparisonReport,
    FitMode,
    FitResult,
    HistoricalStats,
    ParamErrors,
    SmileParams,
    VolQuote,
    days_to_years,
    years_to_days,
)
from app.core.smile import WIDTH_SCALING_C, smile_jacobian, smile_sigma
from app.core.tails import TailFitError, f_of_rho, f_of_rho_derivative

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 500
X_TOL = 1e-10
G_TOL = 1e-12
G_BOUNDS = (1e-8, 5.0)
CHI_BOUNDS = (1.0, 10.0)
N_LOWER = 1e-14
INFEASIBLE_PENALTY = 1e3
DEGENERATE_HEIGHT = 1e-6
MIN_QUOTES = 4

CHI_BELOW_ONE = "historical decay steeper than flat-smile Gaussian (chi < 1)"


class CalibrationError(Exception):
    """Smile calibration error."""
    pass


class FitConvergenceError(CalibrationError):
    """Optimizer stopped at the iteration cap."""

    def __init__(self, message: str, best: Optional[SmileParams] = None):
        super().__init__(message)
        self.best = best


class UnderdeterminedFitError(CalibrationError):
    """Quotes cannot determine the free parameters."""
    pass


class ConstraintDomainError(CalibrationError, ValueError):
    """Inputs of the conditional constraint outside its domain."""
    pass


def initial_guess(quotes: Sequence[VolQuote], T: float) -> SmileParams:
    """g = min sigma, chi = max/min sigma, sqrt(n) = 2.65 g sqrt(T)."""
    sigmas = np.array([q.sigma for q in quotes])
    g = float(sigmas.min())
    chi = max(float(sigmas.max() / sigmas.min()), 1.0 + 1e-3)
    n = (WIDTH_SCALING_C * g * math.sqrt(T)) ** 2
    return SmileParams(g=g, chi=min(chi, CHI_BOUNDS[1]), n=n, T=T)


def _check_quotes(quotes: Sequence[VolQuote], T: float, free: int) -> None:
    if not T > 0:
        raise CalibrationError(f"maturity must be positive, got {T}")
    if len(quotes) < MIN_QUOTES:
        raise UnderdeterminedFitError(f"need at least {MIN_QUOTES} quotes, got {len(quotes)}")
    xs = np.array([q.x for q in quotes])
    weights = np.array([q.weight for q in quotes])
    if np.count_nonzero(weights > 0) <= free:
        raise UnderdeterminedFitError(f"need more than {free} positively weighted quotes")
    if np.unique(xs[weights > 0]).size <= free:
        raise UnderdeterminedFitError(f"need more than {free} distinct quote abscissae")
    center = -0.5 * float(np.min([q.sigma for q in quotes])) ** 2 * T
    if not (xs < center).any() or not (xs > center).any():
        raise UnderdeterminedFitError("quotes must lie on both sides of the smile minimum")


def _arrays(quotes: Sequence[VolQuote]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.array([q.x for q in quotes], dtype=float)
    sigmas = np.array([q.sigma for q in quotes], dtype=float)
    root_w = np.sqrt(np.array([q.weight for q in quotes], dtype=float))
    return xs, sigmas, root_w


def _rms(p: SmileParams, xs: np.ndarray, sigmas: np.ndarray, root_w: np.ndarray) -> float:
    residuals = np.asarray(smile_sigma(p, xs)) - sigmas
    weights = root_w ** 2
    return float(np.sqrt(np.sum(weights * residuals ** 2) / np.sum(weights)))


def _height_over_quotes(p: SmileParams, xs: np.ndarray) -> float:
    """Largest relative rise sigma/g - 1 of the smile over the quoted abscissae."""
    return float(np.max(np.asarray(smile_sigma(p, xs))) / p.g - 1.0)


def _covariance(jac: np.ndarray, residuals: np.ndarray, diagnostics: List[str]) -> np.ndarray:
    m, k = jac.shape
    dof = max(m - k, 1)
    scale = float(np.sum(residuals ** 2)) / dof
    jtj = jac.T @ jac
    norms = np.sqrt(np.diag(jtj))
    # conditioning measured on the column-normalized matrix
    if np.any(norms == 0) or np.linalg.cond(jtj / np.outer(norms, norms)) > 1e12:
        diagnostics.append("degenerate fit: parameter covariance is singular")
        return np.full((k, k), math.nan)
    return scale * np.linalg.inv(jtj)


def _solve(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    bounds: Tuple[List[float], List[float]],
    max_iterations: int,
    to_params: Callable[[np.ndarray], SmileParams],
):
    lower, upper = np.array(bounds[0]), np.array(bounds[1])
    x0 = np.clip(x0, lower, upper)
    result = least_squares(
        residual,
        x0,
        jac=jacobian,
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        xtol=X_TOL,
        gtol=G_TOL,
        ftol=1e-15,
        max_nfev=max_iterations,
    )
    if result.status == 0:
        best = None
        try:
            best = to_params(result.x)
        except (ValueError, CalibrationError):
            pass
        logger.error(f"least squares stopped after {result.nfev} evaluations: {result.message}")
        raise FitConvergenceError(
            f"fit did not converge in {max_iterations} evaluations", best=best
        )
    if result.status < 0 or not np.all(np.isfinite(result.x)):
        raise CalibrationError(f"least squares failed: {result.message}")
    return result


def fit_unconditional(
    quotes: Sequence[VolQuote],
    T: float,
    init: Optional[SmileParams] = None,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """
    Fit (g, chi, n) to the quotes by weighted least squares.

    Args:
        quotes: Market points (at least 4, on both sides of the minimum)
        T: Maturity in years
        init: Starting point, defaults to ``initial_guess``
        max_iterations: Cap on function evaluations

    Returns:
        FitResult with standard errors from the linearized covariance

    Raises:
        UnderdeterminedFitError: If the quotes cannot fix three parameters
        FitConvergenceError: If the cap is reached (carries the best iterate)
    """
    _check_quotes(quotes, T, free=3)
    xs, sigmas, root_w = _arrays(quotes)
    start = init or initial_guess(quotes, T)

    def to_params(v: np.ndarray) -> SmileParams:
        return SmileParams(g=float(v[0]), chi=float(v[1]), n=float(v[2]), T=T)

    def residual(v: np.ndarray) -> np.ndarray:
        return root_w * (np.asarray(smile_sigma(to_params(v), xs)) - sigmas)

    def jacobian(v: np.ndarray) -> np.ndarray:
        return root_w[:, None] * smile_jacobian(to_params(v), xs)

    result = _solve(
        residual,
        jacobian,
        np.array([start.g, start.chi, start.n]),
        ([G_BOUNDS[0], CHI_BOUNDS[0], N_LOWER], [G_BOUNDS[1], CHI_BOUNDS[1], np.inf]),
        max_iterations,
        to_params,
    )
    params = to_params(result.x)
    diagnostics: List[str] = []
    if _height_over_quotes(params, xs) < DEGENERATE_HEIGHT:
        diagnostics.append("degenerate smile: chi at lower bound 1, width n is undetermined")
    if params.g >= G_BOUNDS[1]:
        diagnostics.append("g at upper bound")

    cov = _covariance(result.jac, result.fun, diagnostics)
    errors = np.sqrt(np.abs(np.diag(cov)))
    fit = FitResult(
        params=params,
        param_errors=ParamErrors(g=float(errors[0]), chi=float(errors[1]), n=float(errors[2])),
        rms=_rms(params, xs, sigmas, root_w),
        mode=FitMode.UNCONDITIONAL,
        iterations=int(result.nfev),
        diagnostics=diagnostics,
    )
    logger.info(
        f"unconditional fit g={params.g:.6g} chi={params.chi:.6g} n={params.n:.6g} rms={fit.rms:.3e}"
    )
    return fit


def conditional_chi(mu_H: float, sigma_H: float, g: float, n: float, T: float) -> float:
    """
    chi = 2 f(n / (g^2 T)) / (mu_H sigma_H).

    Values below 1 are returned unchanged; callers decide how to flag them.

    Raises:
        ConstraintDomainError: If any input is non-positive
    """
    for name, value in (("mu_H", mu_H), ("sigma_H", sigma_H), ("g", g), ("n", n), ("T", T)):
        if not value > 0:
            raise ConstraintDomainError(f"{name} must be positive, got {value}")
    chi = 2.0 * f_of_rho(n / (g * g * T)) / (mu_H * sigma_H)
    if chi < 1.0:
        logger.warning(f"conditional chi {chi:.6g} < 1: {CHI_BELOW_ONE}")
    return chi


def extrapolate_hist(hist: HistoricalStats, T2: float) -> HistoricalStats:
    """
    Move historical stats from their lag to maturity T2 (years).

    mu_H scales as 1/sqrt(T) and sigma_H as sqrt(T); their product is unchanged.
    """
    T1 = days_to_years(hist.lag)
    if not T1 > 0 or not T2 > 0:
        raise ConstraintDomainError(f"maturities must be positive, got {T1} and {T2}")
    ratio = math.sqrt(T2 / T1)
    return hist.model_copy(
        update={"mu_H": hist.mu_H / ratio, "sigma_H": hist.sigma_H * ratio, "lag": years_to_days(T2)}
    )


def fit_conditional(
    quotes: Sequence[VolQuote],
    T: float,
    hist: HistoricalStats,
    init: Optional[SmileParams] = None,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """
    Fit (g, n) with chi eliminated by the historical decay constraint.

    Stats measured at a lag other than the maturity are first extrapolated to T.
    Trial points where the constraint gives chi < 1 are evaluated at chi = 1
    with a penalty residual; an optimum below 1 raises.

    Args:
        quotes: Market points
        T: Maturity in years
        hist: Historical sigma_H and mu_H
        init: Starting point (chi is ignored)

    Returns:
        FitResult whose constraint_residual is |chi mu_H sigma_H - 2 f(rho)|

    Raises:
        ConstraintDomainError: If the optimum still requires chi < 1
    """
    _check_quotes(quotes, T, free=2)
    if abs(days_to_years(hist.lag) - T) > 1e-12 * T:
        logger.info(f"extrapolating historical stats from {hist.lag:g} to {years_to_days(T):g} days")
        hist = extrapolate_hist(hist, T)
    product = hist.mu_H * hist.sigma_H
    xs, sigmas, root_w = _arrays(quotes)
    start = init or initial_guess(quotes, T)
    hit_infeasible = []

    def chi_of(v: np.ndarray) -> float:
        g, n = float(v[0]), float(v[1])
        return 2.0 * f_of_rho(n / (g * g * T)) / product

    def chi_gradient(v: np.ndarray) -> np.ndarray:
        g, n = float(v[0]), float(v[1])
        rho = n / (g * g * T)
        df = 2.0 * f_of_rho_derivative(rho) / product
        return np.array([df * (-2.0 * rho / g), df / (g * g * T)])

    def to_params(v: np.ndarray) -> SmileParams:
        return SmileParams(g=float(v[0]), chi=max(chi_of(v), 1.0), n=float(v[1]), T=T)

    def residual(v: np.ndarray) -> np.ndarray:
        chi = chi_of(v)
        if chi < 1.0:
            hit_infeasible.append(True)
        fitted = np.asarray(smile_sigma(to_params(v), xs))
        penalty = INFEASIBLE_PENALTY * max(0.0, 1.0 - chi)
        return np.append(root_w * (fitted - sigmas), penalty)

    def jacobian(v: np.ndarray) -> np.ndarray:
        chi = chi_of(v)
        p = to_params(v)
        full = smile_jacobian(p, xs)
        grad = chi_gradient(v)
        through_chi = full[:, 1:2] * grad[None, :] if chi >= 1.0 else np.zeros((xs.size, 2))
        rows = root_w[:, None] * (full[:, [0, 2]] + through_chi)
        penalty_row = -INFEASIBLE_PENALTY * grad if chi < 1.0 else np.zeros(2)
        return np.vstack([rows, penalty_row])

    try:
        result = _solve(
            residual,
            jacobian,
            np.array([start.g, start.n]),
            ([G_BOUNDS[0], N_LOWER], [G_BOUNDS[1], np.inf]),
            max_iterations,
            to_params,
        )
    except TailFitError as e:
        raise ConstraintDomainError(str(e)) from e

    g, n = float(result.x[0]), float(result.x[1])
    chi = chi_of(result.x)
    if chi < 1.0:
        logger.error(f"conditional optimum needs chi={chi:.6g}")
        raise ConstraintDomainError(f"conditional fit optimum has chi={chi:.6g} < 1: {CHI_BELOW_ONE}")
    params = SmileParams(g=g, chi=chi, n=n, T=T)

    diagnostics: List[str] = []
    if hit_infeasible:
        diagnostics.append(f"optimizer visited trial points with {CHI_BELOW_ONE}")
    if chi - 1.0 < DEGENERATE_HEIGHT:
        diagnostics.append("degenerate smile: constraint pins chi at 1")

    cov = _covariance(result.jac[:-1], result.fun[:-1], diagnostics)
    grad = chi_gradient(result.x)
    chi_var = float(grad @ cov @ grad)
    fit = FitResult(
        params=params,
        param_errors=ParamErrors(
            g=float(math.sqrt(abs(cov[0, 0]))),
            chi=float(math.sqrt(abs(chi_var))),
            n=float(math.sqrt(abs(cov[1, 1]))),
        ),
        rms=_rms(params, xs, sigmas, root_w),
        mode=FitMode.CONDITIONAL,
        constraint_residual=abs(chi * product - 2.0 * f_of_rho(params.rho)),
        iterations=int(result.nfev),
        diagnostics=diagnostics,
    )
    logger.info(
        f"conditional fit g={g:.6g} chi={chi:.6g} n={n:.6g} rms={fit.rms:.3e} "
        f"constraint_residual={fit.constraint_residual:.1e}"
    )
    return fit


def compare_fits(
    quotes: Sequence[VolQuote],
    T: float,
    hist: HistoricalStats,
    level: float = 0.01,
    grid_points: int = 512,
    grid_width: float = 10.0,
) -> ComparisonReport:
    """
    Run both fits and compare their densities and VaR.

    Component failures are recorded in ``errors`` and the remaining parts are
    still reported. Interior minima are searched on [x_min, x_min + 3 sqrt(n)].
    """
    report = ComparisonReport()
    fitters: Dict[str, Callable[[], FitResult]] = {
        FitMode.UNCONDITIONAL.value: lambda: fit_unconditional(quotes, T),
        FitMode.CONDITIONAL.value: lambda: fit_conditional(quotes, T, hist),
    }
    for mode, fitter in fitters.items():
        try:
            fit = fitter()
        except CalibrationError as e:
            logger.error(f"{mode} fit failed: {e}")
            report.errors[mode] = str(e)
            continue
        setattr(report, mode, fit)
        p = fit.params
        try:
            report.grids[mode] = default_grid(p, grid_width, grid_points)
            report.interior_minima[mode] = interior_minima(
                p, p.x_min, p.x_min + 3.0 * math.sqrt(p.n)
            )
            report.var[mode] = value_at_risk(p, level)
        except DensityError as e:
            logger.error(f"{mode} density diagnostics failed: {e}")
            report.errors[mode] = str(e)

    unconditional = report.var.get(FitMode.UNCONDITIONAL.value)
    conditional = report.var.get(FitMode.CONDITIONAL.value)
    if unconditional is not None and conditional is not None:
        report.var_rel_diff = abs(unconditional.lam - conditional.lam) / conditional.lam
        logger.info(f"VaR relative difference {report.var_rel_diff:.4%}")
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def format_fit_report(fit: FitResult) -> str:
    """Human-readable report with one exact parameter line for downstream use."""
    p, e = fit.params, fit.param_errors
    lines = [
        f"mode: {fit.mode.value}",
        f"g: {_fmt(p.g)} +- {_fmt(e.g)}",
        f"chi: {_fmt(p.chi)} +- {_fmt(e.chi)}",
        f"n: {_fmt(p.n)} +- {_fmt(e.n)}",
        f"rho: {_fmt(p.rho)}",
        f"T_days: {_fmt(p.T_days)}",
        f"rms: {_fmt(fit.rms)}",
        f"constraint_residual: {_fmt(fit.constraint_residual)}",
        f"iterations: {fit.iterations}",
    ]
    lines.extend(f"WARN: {message}" for message in fit.diagnostics)
    lines.append(f"params: g={p.g!r} chi={p.chi!r} n={p.n!r} T={p.T!r}")
    return "\n".join(lines) + "\n"


def parse_fit_report(text: str) -> SmileParams:
    """
    Read the exact parameter line of a fit report.

    Raises:
        CalibrationError: If no well-formed ``params:`` line is present
    """
    for line in text.splitlines():
        if not line.startswith("params:"):
            continue
        try:
            fields = dict(item.split("=", 1) for item in line[len("params:"):].split())
            return SmileParams(
                g=float(fields["g"]), chi=float(fields["chi"]), n=float(fields["n"]), T=float(fields["T"])
            )
        except (KeyError, ValueError) as e:
            raise CalibrationError(f"malformed parameter line: {line!r}") from e
    raise CalibrationError("fit report has no 'params:' line")
