"""
Pydantic models for the domain types shared across the calibration toolkit.
"""

import math
from datetime import date
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Log-return coordinate x = ln(K/S0) - rT.
Moneyness = float

DAYS_PER_YEAR = 365.0


def days_to_years(days: float) -> float:
    """Convert a day-quoted maturity to a year fraction (days/365)."""
    return float(days) / DAYS_PER_YEAR


def years_to_days(years: float) -> float:
    """Convert a year fraction to days (years*365)."""
    return float(years) * DAYS_PER_YEAR


class DeltaConvention(str, Enum):
    """How a quoted delta relates to d1."""
    ERF = "erf"
    MARKET_NORM_CDF = "norm_cdf"

    @classmethod
    def _missing_(cls, value: object) -> Optional["DeltaConvention"]:
        if isinstance(value, str):
            return DELTA_CONVENTION_ALIASES.get(value.strip().lower())
        return None


# Alternate spellings accepted in quote files, settings and on the command line.
DELTA_CONVENTION_ALIASES = {"paper_erf": DeltaConvention.ERF}


class FitMode(str, Enum):
    """Smile calibration mode."""
    UNCONDITIONAL = "unconditional"
    CONDITIONAL = "conditional"


class TailSide(str, Enum):
    """Which tail of a return distribution is fitted."""
    RIGHT = "right"
    LEFT = "left"
    BOTH = "both"


class MarketContext(BaseModel):
    """Spot, rate and maturity shared by the pricing functions."""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    S0: float = Field(..., gt=0, description="Spot price")
    r: float = Field(0.0, description="Continuously-compounded annual rate")
    T: float = Field(..., gt=0, description="Maturity in years")


class SmileParams(BaseModel):
    """
    State of the three-parameter smile plus its maturity.

    Construction only requires finite numbers so that invalid parameter sets can
    still be inspected by ``validate_params``; numerical entry points check the
    invariants with ``app.core.smile.require_valid``.
    """
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    g: float = Field(..., description="Minimum implied volatility (annualized)")
    chi: float = Field(..., description="Saturation ratio of the smile")
    n: float = Field(..., description="Squared half width (log-return units)")
    T: float = Field(..., description="Maturity in years")

    @classmethod
    def from_rho(cls, g: float, chi: float, rho: float, T: float) -> "SmileParams":
        """Build parameters from the scale-free width rho = n/(g^2 T)."""
        return cls(g=g, chi=chi, n=rho * g * g * T, T=T)

    @property
    def rho(self) -> float:
        return self.n / (self.g * self.g * self.T)

    @property
    def x_min(self) -> float:
        """Abscissa of the smile minimum, -g^2 T/2."""
        return -0.5 * self.g * self.g * self.T

    @property
    def scale(self) -> float:
        """Unperturbed standard deviation g*sqrt(T)."""
        return self.g * math.sqrt(self.T)

    @property
    def T_days(self) -> float:
        return years_to_days(self.T)


class SmileShapeReport(BaseModel):
    """Derived shape quantities of a smile."""
    model_config = ConfigDict(frozen=True)

    x_min: float
    height: float
    half_width: float
    rho: float
    c_implied: float


class Violation(BaseModel):
    """One failed parameter check."""
    model_config = ConfigDict(frozen=True)

    field: str
    kind: str = Field(..., description="'invariant' or 'table_bounds'")
    message: str


class ValidationResult(BaseModel):
    """Outcome of ``validate_params``."""
    violations: List[Violation] = Field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


class DensityGrid(BaseModel):
    """Tabulated implied PDF and CCDF of returns."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    xs: np.ndarray
    pdf: np.ndarray
    ccdf: np.ndarray
    norm_defect: float
    negative_mask: np.ndarray

    @model_validator(mode="after")
    def check_shapes(self) -> "DensityGrid":
        """Validate array lengths and grid ordering."""
        size = self.xs.shape
        for name in ("pdf", "ccdf", "negative_mask"):
            if getattr(self, name).shape != size:
                raise ValueError(f"{name} must have the same shape as xs")
        if self.xs.ndim != 1 or self.xs.size < 2:
            raise ValueError("xs must be a one-dimensional grid with at least 2 points")
        if not np.all(np.diff(self.xs) > 0):
            raise ValueError("xs must be strictly ascending")
        return self

    @property
    def negative_count(self) -> int:
        return int(np.count_nonzero(self.negative_mask))


class VarResult(BaseModel):
    """Value-at-risk threshold for a given tail probability."""
    model_config = ConfigDict(frozen=True)

    lam: float = Field(..., description="Loss threshold Lambda_VAR (log-return)")
    level: float = Field(..., gt=0, lt=1)
    quadrature_error: float = Field(..., ge=0)


class FitWindow(BaseModel):
    """Absolute abscissa range used by a straight-line tail fit."""
    model_config = ConfigDict(frozen=True)

    lo: float
    hi: float
    side: TailSide = TailSide.RIGHT

    @model_validator(mode="after")
    def check_order(self) -> "FitWindow":
        if not self.lo < self.hi:
            raise ValueError(f"window lower bound {self.lo} must be below {self.hi}")
        return self


class TransitionRegion(BaseModel):
    """
    The band sqrt(n)/2 <= u <= sqrt(n) measured from the smile minimum.

    ``x_lo``/``x_hi`` are offsets from ``center``; ``absolute`` turns them into
    grid abscissae on the requested side.
    """
    model_config = ConfigDict(frozen=True)

    x_lo: float = Field(..., gt=0)
    x_hi: float = Field(..., gt=0)
    center: float = 0.0
    side: TailSide = TailSide.RIGHT

    @model_validator(mode="after")
    def check_order(self) -> "TransitionRegion":
        if not self.x_lo < self.x_hi:
            raise ValueError("transition region requires x_lo < x_hi")
        if self.side == TailSide.BOTH:
            raise ValueError("transition region side must be 'right' or 'left'")
        return self

    def absolute(self) -> FitWindow:
        if self.side == TailSide.LEFT:
            return FitWindow(lo=self.center - self.x_hi, hi=self.center - self.x_lo, side=self.side)
        return FitWindow(lo=self.center + self.x_lo, hi=self.center + self.x_hi, side=self.side)


class TailEstimate(BaseModel):
    """Exponential decay rate fitted on a semi-log CCDF."""
    model_config = ConfigDict(frozen=True)

    mu: float
    intercept: float
    rms_residual: float = Field(..., ge=0)
    window: FitWindow
    points: int = Field(..., ge=2)


class PriceSeries(BaseModel):
    """Daily closes of one instrument."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    label: str
    timestamps: List[date]
    closes: np.ndarray

    @model_validator(mode="after")
    def check_series(self) -> "PriceSeries":
        if len(self.timestamps) != self.closes.size:
            raise ValueError("timestamps and closes must have equal length")
        if self.closes.size < 2:
            raise ValueError("a price series needs at least 2 observations")
        if not np.all(np.isfinite(self.closes)) or np.any(self.closes <= 0):
            raise ValueError("closes must be finite and strictly positive")
        for i in range(1, len(self.timestamps)):
            if self.timestamps[i] <= self.timestamps[i - 1]:
                raise ValueError(
                    f"timestamps must be strictly ascending (row {i + 1}: {self.timestamps[i]})"
                )
        return self


class ReturnSeries(BaseModel):
    """Lagged log-returns."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    lag: int = Field(..., ge=1)
    values: np.ndarray
    label: str = ""


class HistoricalStats(BaseModel):
    """Volatility and tail decay of one subgroup of historical returns."""
    model_config = ConfigDict(frozen=True)

    sigma_H: float = Field(..., gt=0)
    mu_H: float = Field(..., gt=0)
    subgroup_size: int = Field(..., ge=300)
    lag: float = Field(..., gt=0, description="Return lag in days")
    label: str = ""
    group_index: int = 0
    rms_residual: float = 0.0

    @property
    def product(self) -> float:
        return self.mu_H * self.sigma_H

    @classmethod
    def pooled(cls, stats: List["HistoricalStats"]) -> "HistoricalStats":
        """Average sigma_H and mu_H over groups that share one lag."""
        if not stats:
            raise ValueError("cannot pool an empty list of historical stats")
        lags = {s.lag for s in stats}
        if len(lags) != 1:
            raise ValueError(f"pooled stats must share one lag, got {sorted(lags)}")
        return cls(
            sigma_H=float(np.mean([s.sigma_H for s in stats])),
            mu_H=float(np.mean([s.mu_H for s in stats])),
            subgroup_size=int(sum(s.subgroup_size for s in stats)),
            lag=stats[0].lag,
            label=",".join(sorted({s.label for s in stats if s.label})),
            group_index=-1,
            rms_residual=float(np.sqrt(np.mean([s.rms_residual ** 2 for s in stats]))),
        )


class ScalingFit(BaseModel):
    """Constant of the sigma_H = C1/mu_H scaling."""
    model_config = ConfigDict(frozen=True)

    C1: float = Field(..., gt=0)
    uncertainty: float = Field(..., ge=0)
    count: int
    spread: float = Field(0.0, ge=0, description="(max - min) / mean of the products mu_H sigma_H")


class VolQuote(BaseModel):
    """One market point of the smile."""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    x: float
    sigma: float = Field(..., gt=0)
    weight: float = Field(1.0, ge=0)

    @classmethod
    def from_delta(
        cls,
        delta: float,
        sigma: float,
        T: float,
        conv: DeltaConvention = DeltaConvention.ERF,
        weight: float = 1.0,
    ) -> "VolQuote":
        """Convert a delta quote with its own sigma in a single pass."""
        from app.core.pricing import delta_to_x

        return cls(x=delta_to_x(delta, sigma, T, conv), sigma=sigma, weight=weight)


class ParamErrors(BaseModel):
    """Standard errors from the linearized covariance."""
    model_config = ConfigDict(frozen=True)

    g: float
    chi: float
    n: float


class FitResult(BaseModel):
    """Outcome of a smile calibration."""
    model_config = ConfigDict(frozen=True)

    params: SmileParams
    param_errors: ParamErrors
    rms: float = Field(..., ge=0)
    mode: FitMode
    constraint_residual: Optional[float] = None
    iterations: int = 0
    diagnostics: List[str] = Field(default_factory=list)


class SweepPoint(BaseModel):
    """One parameter tuple of the validation sweep."""
    model_config = ConfigDict(frozen=True)

    g: float
    chi: float
    rho: float
    T_days: float
    mu_fit: Optional[float] = None
    mu_pred: float
    rel_err: Optional[float] = None
    non_adiabatic: bool = False
    error: Optional[str] = None

    def key(self) -> tuple:
        return (self.g, self.chi, self.rho, self.T_days)


class SweepReport(BaseModel):
    """Fitted versus predicted decay over a parameter grid."""
    points: List[SweepPoint]
    rel_mse: float
    used: int

    @property
    def failures(self) -> List[SweepPoint]:
        return [p for p in self.points if p.error is not None]


class ComparisonReport(BaseModel):
    """Side-by-side unconditional and conditional fits."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    unconditional: Optional[FitResult] = None
    conditional: Optional[FitResult] = None
    grids: Dict[str, DensityGrid] = Field(default_factory=dict)
    var: Dict[str, VarResult] = Field(default_factory=dict)
    interior_minima: Dict[str, List[float]] = Field(default_factory=dict)
    var_rel_diff: Optional[float] = None
    errors: Dict[str, str] = Field(default_factory=dict)
