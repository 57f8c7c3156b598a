"""
Exponential tail decay of the implied CCDF: analytic prediction and empirical fit.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import erfcx

from app.core.density import DensityError, density_grid
from app.core.models import (
    DensityGrid,
    FitWindow,
    SmileParams,
    SweepPoint,
    SweepReport,
    TailEstimate,
    TailSide,
    TransitionRegion,
    days_to_years,
)
from app.core.smile import TABLE_BOUNDS, SmileParamsError, require_valid

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 8
SWEEP_GRID_POINTS = 33
_SQRT_PI = math.sqrt(math.pi)


class TailFitError(Exception):
    """Tail decay could not be estimated."""
    pass


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise TailFitError(f"{name} must be positive, got {value}")


def f_of_rho(rho: float) -> float:
    """
    Dimensionless decay factor of the flat-smile CCDF over the transition region.

    f = ln[erfc(a) / erfc(b)] / sqrt(rho), a = sqrt(rho/8), b = sqrt(rho/2).
    Written through erfcx so the ratio never cancels: ln erfc(z) = ln erfcx(z) - z^2.

    Raises:
        TailFitError: If rho <= 0
    """
    _check_positive(rho=rho)
    a = 0.5 * math.sqrt(rho / 2.0)
    b = math.sqrt(rho / 2.0)
    h = 0.375 * rho + math.log(float(erfcx(a))) - math.log(float(erfcx(b)))
    return h / math.sqrt(rho)


def f_of_rho_derivative(rho: float) -> float:
    """Analytic d f / d rho."""
    _check_positive(rho=rho)
    a = 0.5 * math.sqrt(rho / 2.0)
    b = math.sqrt(rho / 2.0)
    h = 0.375 * rho + math.log(float(erfcx(a))) - math.log(float(erfcx(b)))
    h_prime = (b / float(erfcx(b)) - a / float(erfcx(a))) / (_SQRT_PI * rho)
    return h_prime / math.sqrt(rho) - 0.5 * h / rho ** 1.5


def mu_flat(g: float, T: float, rho: float) -> float:
    """Decay rate 2 f(rho) / (g sqrt(T)) of a flat smile."""
    _check_positive(g=g, T=T, rho=rho)
    return 2.0 * f_of_rho(rho) / (g * math.sqrt(T))


def mu_predicted(p: SmileParams) -> float:
    """Decay rate of the smile-implied CCDF, mu_flat / chi."""
    try:
        require_valid(p)
    except SmileParamsError as e:
        raise TailFitError(str(e)) from e
    return mu_flat(p.g, p.T, p.rho) / p.chi


def transition_region(p: SmileParams, side: TailSide = TailSide.RIGHT) -> TransitionRegion:
    """The band sqrt(n)/2 <= |u| <= sqrt(n) around the smile minimum."""
    width = math.sqrt(p.n)
    return TransitionRegion(x_lo=0.5 * width, x_hi=width, center=p.x_min, side=side)


def fit_tail(grid: DensityGrid, window: Union[TransitionRegion, FitWindow]) -> TailEstimate:
    """
    Straight-line fit of the log tail probability on a window of the grid.

    Right windows fit ln(ccdf); left windows fit ln(1 - ccdf), the mirrored
    loss tail. mu is the decay rate away from the center in both cases.

    Args:
        grid: Tabulated CCDF
        window: Transition region or absolute window

    Returns:
        TailEstimate with mu, intercept at the window start and rms residual

    Raises:
        TailFitError: Fewer than 8 grid points in the window or a non-positive tail value
    """
    bounds = window.absolute() if isinstance(window, TransitionRegion) else window
    slack = 1e-12 * max(abs(bounds.lo), abs(bounds.hi), 1e-300)
    mask = (grid.xs >= bounds.lo - slack) & (grid.xs <= bounds.hi + slack)
    count = int(np.count_nonzero(mask))
    if count < MIN_FIT_POINTS:
        raise TailFitError(
            f"window [{bounds.lo:.6g}, {bounds.hi:.6g}] holds {count} grid points, "
            f"need at least {MIN_FIT_POINTS}"
        )

    xs = grid.xs[mask]
    tail = grid.ccdf[mask] if bounds.side != TailSide.LEFT else 1.0 - grid.ccdf[mask]
    if np.any(tail <= 0) or not np.all(np.isfinite(tail)):
        raise TailFitError("tail probability must be positive on the fit window")

    return semilog_fit(xs, np.log(tail), bounds)


def semilog_fit(xs: np.ndarray, ys: np.ndarray, bounds: FitWindow) -> TailEstimate:
    """Least-squares line through (x, ln tail); mu is the decay away from the center."""
    slope, offset = np.polyfit(xs, ys, 1)
    residuals = ys - (slope * xs + offset)
    mu = -slope if bounds.side != TailSide.LEFT else slope
    start = xs[0] if bounds.side != TailSide.LEFT else xs[-1]
    return TailEstimate(
        mu=float(mu),
        intercept=float(slope * start + offset),
        rms_residual=float(np.sqrt(np.mean(residuals ** 2))),
        window=bounds,
        points=int(xs.size),
    )


class ParameterBounds(BaseModel):
    """Closed ranges of the sweep axes; maturities in days."""
    model_config = ConfigDict(frozen=True)

    g: Tuple[float, float] = TABLE_BOUNDS["g"]
    chi: Tuple[float, float] = TABLE_BOUNDS["chi"]
    rho: Tuple[float, float] = TABLE_BOUNDS["rho"]
    T_days: Tuple[float, float] = (1.0, 1080.0)

    @model_validator(mode="after")
    def check_ranges(self) -> "ParameterBounds":
        for name in ("g", "chi", "rho", "T_days"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.chi[0] < 1.0:
            raise ValueError(f"chi range must start at >= 1, got {self.chi[0]}")
        return self

    def within_table(self) -> bool:
        table = {"T_days": (1.0, 1080.0), **{k: TABLE_BOUNDS[k] for k in ("g", "chi", "rho")}}
        return all(
            table[name][0] <= getattr(self, name)[0] and getattr(self, name)[1] <= table[name][1]
            for name in table
        )


def _axis(lo: float, hi: float, samples: int, log: bool = False) -> np.ndarray:
    if samples == 1 or lo == hi:
        return np.array([lo])
    return np.geomspace(lo, hi, samples) if log else np.linspace(lo, hi, samples)


def sweep_point(
    g: float, chi: float, rho: float, T_days: float, grid_points: int = SWEEP_GRID_POINTS
) -> SweepPoint:
    """Fit the right-tail decay of one parameter tuple and compare with the prediction."""
    p = SmileParams.from_rho(g=g, chi=chi, rho=rho, T=days_to_years(T_days))
    predicted = mu_predicted(p)
    try:
        window = transition_region(p).absolute()
        grid = density_grid(p, window.lo, window.hi, grid_points)
        estimate = fit_tail(grid, window)
    except (DensityError, TailFitError) as e:
        logger.warning(f"sweep point g={g} chi={chi} rho={rho} T_days={T_days} failed: {e}")
        return SweepPoint(g=g, chi=chi, rho=rho, T_days=T_days, mu_pred=predicted, error=str(e))
    return SweepPoint(
        g=g,
        chi=chi,
        rho=rho,
        T_days=T_days,
        mu_fit=estimate.mu,
        mu_pred=predicted,
        rel_err=(estimate.mu - predicted) / predicted,
        non_adiabatic=bool(grid.negative_mask.any()),
    )


def _run_point(args: Tuple[float, float, float, float, int]) -> SweepPoint:
    return sweep_point(*args)


def validation_sweep(
    bounds: Optional[ParameterBounds] = None,
    samples_per_axis: int = 3,
    workers: int = 1,
    grid_points: int = SWEEP_GRID_POINTS,
) -> SweepReport:
    """
    Compare fitted and predicted decay rates over a parameter grid.

    g, chi and rho are sampled uniformly, T log-uniformly. Points whose density
    goes negative inside the fit window are flagged non-adiabatic and kept out
    of the relative mean squared error, as are failed points.

    Args:
        bounds: Axis ranges, defaults to the calibrated table
        samples_per_axis: Samples on each of the four axes
        workers: Worker processes; 1 runs serially

    Returns:
        SweepReport sorted by parameter tuple
    """
    bounds = bounds or ParameterBounds()
    if samples_per_axis < 1:
        raise TailFitError(f"samples_per_axis must be >= 1, got {samples_per_axis}")
    if not bounds.within_table():
        logger.warning("sweep bounds extend beyond the calibrated parameter table")

    tasks = [
        (float(g), float(chi), float(rho), float(t), grid_points)
        for g in _axis(*bounds.g, samples_per_axis)
        for chi in _axis(*bounds.chi, samples_per_axis)
        for rho in _axis(*bounds.rho, samples_per_axis)
        for t in _axis(*bounds.T_days, samples_per_axis, log=True)
    ]
    logger.info(f"running validation sweep over {len(tasks)} parameter tuples")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points: List[SweepPoint] = list(pool.map(_run_point, tasks))
    else:
        points = [_run_point(task) for task in tasks]
    points.sort(key=SweepPoint.key)

    used = [pt.rel_err for pt in points if pt.rel_err is not None and not pt.non_adiabatic]
    rel_mse = float(np.mean(np.square(used))) if used else math.nan
    logger.info(f"sweep relative MSE {rel_mse:.4g} over {len(used)} of {len(points)} points")
    return SweepReport(points=points, rel_mse=rel_mse, used=len(used))
