"""
Command-line front end.

Commands:
  fit       calibrate a smile to a quote file (unconditional or conditional)
  density   tabulate the implied density of fitted parameters
  var       value-at-risk of fitted parameters
  hist      historical sigma_H / mu_H per subgroup and the C1 scaling
  sweep     fitted versus predicted tail decay over the parameter table
  compare   unconditional versus conditional fit, densities and VaR
  fixtures  write the bundled synthetic data files

Exit codes: 0 success, 1 I/O or parse error, 2 numerical or fit failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.config import ConfigError, Settings, load_settings
from app.core.calibration import (
    CalibrationError,
    compare_fits,
    fit_conditional,
    fit_unconditional,
    format_fit_report,
    parse_fit_report,
)
from app.core.density import DensityError, default_grid, value_at_risk
from app.core.file_io import (
    DataFileError,
    read_price_csv,
    read_quotes_csv,
    read_stats_csv,
    read_text,
    write_density_csv,
    write_stats_csv,
    write_sweep_csv,
    write_text,
)
from app.core.fixtures import write_bundle
from app.core.history import HistoryError, fit_scaling, lag_spread, log_returns, subgroup_stats
from app.core.logging_setup import configure_logging
from app.core.models import (
    DELTA_CONVENTION_ALIASES,
    ComparisonReport,
    DeltaConvention,
    FitMode,
    HistoricalStats,
    SmileParams,
    days_to_years,
)
from app.core.pricing import PricingError
from app.core.smile import SmileParamsError, require_valid, validate_params
from app.core.tails import TailFitError, validation_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_NUMERIC = 2

NUMERIC_ERRORS = (
    PricingError,
    SmileParamsError,
    DensityError,
    TailFitError,
    HistoryError,
    CalibrationError,
)

COMMANDS = ("fit", "density", "var", "hist", "sweep", "compare", "fixtures")
CONVENTION_CHOICES = [c.value for c in DeltaConvention] + sorted(DELTA_CONVENTION_ALIASES)


class RunConfig(BaseModel):
    """Resolved inputs of one command invocation."""
    model_config = ConfigDict(frozen=True)

    command: str
    inputs: List[Path] = Field(default_factory=list)
    hist: Optional[Path] = None
    output: Optional[Path] = None
    mode: FitMode = FitMode.UNCONDITIONAL
    level: float = 0.01
    grid_width: float = 10.0
    grid_points: int = 512
    convention: Optional[DeltaConvention] = None
    seed: int = 0

    @model_validator(mode="after")
    def check_paths(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if not 0.0 < self.level <= 0.5:
            raise ValueError(f"VaR level must lie in (0, 0.5], got {self.level}")
        if self.command in ("fit", "compare", "hist") and not self.inputs:
            raise ValueError(f"command '{self.command}' needs an input file")
        needs_hist = self.command == "compare" or (
            self.command == "fit" and self.mode == FitMode.CONDITIONAL
        )
        if needs_hist and self.hist is None:
            raise ValueError(f"command '{self.command}' needs --hist")
        if self.command in ("density", "sweep", "fixtures") and self.output is None:
            raise ValueError(f"command '{self.command}' needs --output")
        return self


def warn(message: str) -> None:
    """Report a warning condition in human and machine-parsable form."""
    logger.warning(message)
    print(f"WARN: {message}")


def _add_params_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--params-from", help="fit report holding a 'params:' line")
    parser.add_argument("--g", type=float, help="minimum volatility")
    parser.add_argument("--chi", type=float, help="saturation ratio")
    parser.add_argument("--n", type=float, help="squared half width")
    parser.add_argument("--T-days", type=float, dest="T_days", help="maturity in days")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smile-calibration", description="Volatility smile calibration")
    parser.add_argument("--config", help="key=value settings file")
    parser.add_argument("--log-level", dest="log_level")
    parser.add_argument("--log-format", dest="log_format", choices=["console", "json"])
    sub = parser.add_subparsers(dest="cmd")

    p_fit = sub.add_parser("fit", help="Calibrate a smile to quotes")
    p_fit.add_argument("--quotes", "-q", required=True)
    p_fit.add_argument("--mode", choices=[m.value for m in FitMode], default=FitMode.UNCONDITIONAL.value)
    p_fit.add_argument("--hist", help="historical stats CSV (conditional mode)")
    p_fit.add_argument("--convention", choices=CONVENTION_CHOICES)
    p_fit.add_argument("--output", "-o")

    p_density = sub.add_parser("density", help="Tabulate the implied density")
    _add_params_arguments(p_density)
    p_density.add_argument("--grid-points", type=int, dest="grid_points")
    p_density.add_argument("--grid-width", type=float, dest="grid_width")
    p_density.add_argument("--output", "-o", required=True)

    p_var = sub.add_parser("var", help="Value-at-risk of fitted parameters")
    _add_params_arguments(p_var)
    p_var.add_argument("--level", type=float, dest="var_level")
    p_var.add_argument("--output", "-o")

    p_hist = sub.add_parser("hist", help="Historical subgroup statistics")
    p_hist.add_argument("--prices", "-p", nargs="+", required=True)
    p_hist.add_argument("--lags", type=int, nargs="+", default=[1])
    p_hist.add_argument("--overlapping", action="store_true")
    p_hist.add_argument("--group-size", type=int, dest="group_size")
    p_hist.add_argument("--output", "-o")

    p_sweep = sub.add_parser("sweep", help="Fitted versus predicted tail decay")
    p_sweep.add_argument("--samples", type=int, dest="sweep_samples")
    p_sweep.add_argument("--workers", type=int, dest="sweep_workers")
    p_sweep.add_argument("--output", "-o", required=True)

    p_compare = sub.add_parser("compare", help="Unconditional versus conditional fit")
    p_compare.add_argument("--quotes", "-q", required=True)
    p_compare.add_argument("--hist", required=True)
    p_compare.add_argument("--level", type=float, dest="var_level")
    p_compare.add_argument("--convention", choices=CONVENTION_CHOICES)
    p_compare.add_argument("--output", "-o")

    p_fixtures = sub.add_parser("fixtures", help="Write the bundled synthetic fixtures")
    p_fixtures.add_argument("--output", "-o", required=True, help="target directory")
    p_fixtures.add_argument("--seed", type=int)
    return parser


def _settings_for(args: argparse.Namespace) -> Settings:
    names = (
        "log_level", "log_format", "var_level", "grid_points", "grid_width",
        "group_size", "sweep_samples", "sweep_workers", "seed",
    )
    overrides = {name: getattr(args, name, None) for name in names}
    if getattr(args, "convention", None):
        overrides["delta_convention"] = args.convention
    return load_settings(args.config, **overrides)


def build_run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    inputs = [getattr(args, "quotes", None)] + list(getattr(args, "prices", None) or [])
    return RunConfig(
        command=args.cmd,
        inputs=[Path(p) for p in inputs if p],
        hist=Path(args.hist) if getattr(args, "hist", None) else None,
        output=Path(args.output) if getattr(args, "output", None) else None,
        mode=FitMode(getattr(args, "mode", FitMode.UNCONDITIONAL.value)),
        level=settings.var_level,
        grid_width=settings.grid_width,
        grid_points=settings.grid_points,
        convention=settings.delta_convention,
        seed=settings.seed,
    )


def _params(args: argparse.Namespace) -> SmileParams:
    if args.params_from:
        p = parse_fit_report(read_text(args.params_from))
    else:
        missing = [name for name in ("g", "chi", "n", "T_days") if getattr(args, name) is None]
        if missing:
            raise DataFileError(f"missing parameter option(s): {', '.join('--' + m for m in missing)}")
        p = SmileParams(g=args.g, chi=args.chi, n=args.n, T=days_to_years(args.T_days))
    for violation in validate_params(p, table_bounds=True).violations:
        if violation.kind == "table_bounds":
            warn(f"parameter outside the calibrated range: {violation.message}")
    return require_valid(p)


def _hist(path: Path) -> HistoricalStats:
    stats = read_stats_csv(path)
    if len(stats) == 1:
        return stats[0]
    try:
        return HistoricalStats.pooled(stats)
    except ValueError as e:
        raise DataFileError(str(e), path) from e


def cmd_fit(config: RunConfig, settings: Settings) -> int:
    quote_file = read_quotes_csv(config.inputs[0], convention=config.convention)
    if config.mode == FitMode.CONDITIONAL:
        fit = fit_conditional(
            quote_file.quotes, quote_file.T, _hist(config.hist), max_iterations=settings.fit_max_iterations
        )
    else:
        fit = fit_unconditional(quote_file.quotes, quote_file.T, max_iterations=settings.fit_max_iterations)
    report = format_fit_report(fit)
    for message in fit.diagnostics:
        logger.warning(message)
    if config.output:
        write_text(config.output, report)
    print(report, end="")
    return EXIT_OK


def cmd_density(config: RunConfig, args: argparse.Namespace) -> int:
    p = _params(args)
    grid = default_grid(p, config.grid_width, config.grid_points)
    write_density_csv(config.output, grid)
    if grid.negative_count:
        warn(f"implied density negative at {grid.negative_count} of {grid.xs.size} grid points")
    print(f"points: {grid.xs.size}")
    print(f"norm_defect: {grid.norm_defect:.6g}")
    return EXIT_OK


def cmd_var(config: RunConfig, args: argparse.Namespace) -> int:
    p = _params(args)
    result = value_at_risk(p, config.level)
    text = (
        f"level: {result.level:.6g}\n"
        f"lambda: {result.lam:.6g}\n"
        f"quadrature_error: {result.quadrature_error:.3g}\n"
        f"lambda_exact: {result.lam!r}\n"
    )
    if config.output:
        write_text(config.output, text)
    print(text, end="")
    return EXIT_OK


def cmd_hist(config: RunConfig, args: argparse.Namespace, settings: Settings) -> int:
    stats: List[HistoricalStats] = []
    for path in config.inputs:
        series = read_price_csv(path)
        for lag in args.lags:
            returns = log_returns(series, lag, overlapping=True if args.overlapping else None)
            stats.extend(
                subgroup_stats(
                    returns,
                    settings.group_size,
                    settings.tail_lower_pct,
                    settings.tail_upper_pct,
                    settings.tail_side,
                )
            )
    if config.output:
        write_stats_csv(config.output, stats)
    for s in stats:
        print(
            f"{s.label} lag={s.lag:g} group={s.group_index} sigma_H={s.sigma_H:.6g} "
            f"mu_H={s.mu_H:.6g} product={s.product:.6g}"
        )
    if len(stats) >= 3:
        scaling = fit_scaling(stats)
        print(f"C1: {scaling.C1:.6g} +- {scaling.uncertainty:.6g} ({scaling.count} groups)")
        if len(args.lags) > 1:
            print(f"lag_spread: {lag_spread(stats):.6g}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, settings: Settings) -> int:
    report = validation_sweep(samples_per_axis=settings.sweep_samples, workers=settings.sweep_workers)
    write_sweep_csv(config.output, report)
    for point in report.failures:
        warn(f"sweep point {point.key()} failed: {point.error}")
    flagged = sum(1 for p in report.points if p.non_adiabatic)
    if flagged:
        warn(f"{flagged} sweep point(s) have negative density in the fit window")
    print(f"points: {len(report.points)}")
    print(f"used: {report.used}")
    print(f"rel_mse: {report.rel_mse:.6g}")
    return EXIT_OK


def format_comparison(report: ComparisonReport) -> str:
    lines = []
    for mode in (FitMode.UNCONDITIONAL.value, FitMode.CONDITIONAL.value):
        fit = getattr(report, mode)
        lines.append(f"[{mode}]")
        if fit is not None:
            lines.extend(format_fit_report(fit).splitlines())
        if mode in report.var:
            lines.append(f"var_lambda: {report.var[mode].lam:.6g}")
        if mode in report.grids:
            grid = report.grids[mode]
            lines.append(f"norm_defect: {grid.norm_defect:.6g}")
            lines.append(f"negative_points: {grid.negative_count}")
        if mode in report.interior_minima:
            minima = report.interior_minima[mode]
            lines.append(f"interior_minima: {', '.join(f'{x:.6g}' for x in minima) or 'none'}")
        if mode in report.errors:
            lines.append(f"error: {report.errors[mode]}")
    if report.var_rel_diff is not None:
        lines.append(f"var_rel_diff: {report.var_rel_diff:.6g}")
    return "\n".join(lines) + "\n"


def cmd_compare(config: RunConfig) -> int:
    quote_file = read_quotes_csv(config.inputs[0], convention=config.convention)
    report = compare_fits(
        quote_file.quotes,
        quote_file.T,
        _hist(config.hist),
        level=config.level,
        grid_points=config.grid_points,
        grid_width=config.grid_width,
    )
    for mode, grid in report.grids.items():
        if grid.negative_count:
            warn(f"{mode} implied density negative at {grid.negative_count} grid points")
    for mode, minima in report.interior_minima.items():
        if minima:
            warn(f"{mode} implied density has {len(minima)} interior minimum(s)")
    text = format_comparison(report)
    if config.output:
        write_text(config.output, text)
    print(text, end="")
    return EXIT_OK if not report.errors else EXIT_NUMERIC


def cmd_fixtures(config: RunConfig) -> int:
    paths = write_bundle(config.output, config.seed)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entrypoint."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.cmd:
        parser.print_help()
        return EXIT_OK

    try:
        settings = _settings_for(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    configure_logging(settings.log_level, settings.log_format)

    try:
        config = build_run_config(args, settings)
    except ValidationError as e:
        logger.error(f"invalid arguments: {e}")
        return EXIT_IO

    handlers: Dict[str, Callable[[], int]] = {
        "fit": lambda: cmd_fit(config, settings),
        "density": lambda: cmd_density(config, args),
        "var": lambda: cmd_var(config, args),
        "hist": lambda: cmd_hist(config, args, settings),
        "sweep": lambda: cmd_sweep(config, settings),
        "compare": lambda: cmd_compare(config),
        "fixtures": lambda: cmd_fixtures(config),
    }
    try:
        return handlers[config.command]()
    except (DataFileError, ConfigError, OSError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NUMERIC_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError, ArithmeticError) as e:
        logger.error(f"invalid value: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:
        logger.exception(f"unexpected failure in '{config.command}'")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
