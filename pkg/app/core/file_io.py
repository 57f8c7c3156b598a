"""
Reading and writing the CSV and report files used by the command line.
"""

import io
import logging
import re
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.models import (
    DeltaConvention,
    DensityGrid,
    HistoricalStats,
    PriceSeries,
    SweepReport,
    VolQuote,
    days_to_years,
)
from app.core.pricing import PricingDomainError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DENSITY_COLUMNS = ["x", "pdf", "ccdf", "negative_flag"]
SWEEP_COLUMNS = ["g", "chi", "rho", "T_days", "mu_fit", "mu_pred", "rel_err"]
STATS_COLUMNS = ["label", "lag_days", "group_index", "sigma_H", "mu_H", "rms_residual"]

_METADATA = re.compile(r"(\w+)=(\S+)")


class DataFileError(Exception):
    """Malformed or unreadable data file."""

    def __init__(self, message: str, path: Optional[PathLike] = None, row: Optional[int] = None):
        location = f"{path}" if path is not None else ""
        if row is not None:
            location += f":{row}"
        super().__init__(f"{location}: {message}" if location else message)
        self.path = path
        self.row = row


class QuoteFile(NamedTuple):
    quotes: List[VolQuote]
    T: float
    convention: DeltaConvention


def read_text(path: PathLike) -> str:
    """Read a text file, falling back to single-byte encodings."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataFileError(f"cannot read file: {e.strerror}", path) from e
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        for encoding in ["latin-1", "cp1252"]:
            try:
                return data.decode(encoding)
            except UnicodeDecodeError:
                continue
        raise DataFileError("unable to decode file with any supported encoding", path)


def _split_metadata(text: str) -> Tuple[Dict[str, str], str, int]:
    """Leading '#' lines as a dict, the remaining CSV body and its first line number."""
    metadata: Dict[str, str] = {}
    lines = text.splitlines()
    start = 0
    while start < len(lines) and (lines[start].startswith("#") or not lines[start].strip()):
        metadata.update(_METADATA.findall(lines[start]))
        start += 1
    return metadata, "\n".join(lines[start:]), start + 1


def _numeric_frame(body: str, path: PathLike, header_line: int, required: List[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(io.StringIO(body), dtype=str, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFileError(f"malformed CSV: {e}", path) from e
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataFileError(f"missing column(s) {', '.join(missing)}", path, header_line)
    for column in required:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = values.isna() | ~np.isfinite(values.fillna(0.0))
        if bad.any():
            index = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataFileError(
                f"column '{column}' has non-numeric value {frame[column].iloc[index]!r}",
                path,
                header_line + 1 + index,
            )
        frame[column] = values
    return frame


def read_quotes_csv(
    path: PathLike,
    T_days: Optional[float] = None,
    convention: Optional[DeltaConvention] = None,
) -> QuoteFile:
    """
    Read smile quotes.

    The file starts with ``# T_days=<int> convention=<erf|norm_cdf>`` (``paper_erf`` reads as erf)
    followed by a ``delta,sigma`` or ``x,sigma`` header and an optional
    ``weight`` column. Delta quotes are converted with their own sigma; an
    explicit ``convention`` overrides the metadata line.

    Raises:
        DataFileError: With the offending row number
    """
    metadata, body, header_line = _split_metadata(read_text(path))
    try:
        days = float(T_days if T_days is not None else metadata["T_days"])
        conv = convention or DeltaConvention(metadata.get("convention", DeltaConvention.ERF.value))
    except KeyError as e:
        raise DataFileError("missing '# T_days=...' metadata line", path, 1) from e
    except ValueError as e:
        raise DataFileError(f"invalid metadata: {e}", path, 1) from e
    if not days > 0:
        raise DataFileError(f"T_days must be positive, got {days}", path, 1)
    T = days_to_years(days)

    head = pd.read_csv(io.StringIO(body), nrows=0).columns.str.strip() if body.strip() else []
    coordinate = "delta" if "delta" in head else "x"
    required = [coordinate, "sigma"] + (["weight"] if "weight" in head else [])
    frame = _numeric_frame(body, path, header_line, required)

    quotes = []
    for index, row in enumerate(frame.itertuples(index=False)):
        record = row._asdict()
        weight = float(record.get("weight", 1.0))
        try:
            if coordinate == "delta":
                quote = VolQuote.from_delta(record["delta"], record["sigma"], T, conv, weight)
            else:
                quote = VolQuote(x=record["x"], sigma=record["sigma"], weight=weight)
        except (ValidationError, PricingDomainError) as e:
            raise DataFileError(f"invalid quote: {e}", path, header_line + 1 + index) from e
        quotes.append(quote)
    logger.info(f"read {len(quotes)} quotes from {path} (T_days={days:g}, {conv.value})")
    return QuoteFile(quotes=quotes, T=T, convention=conv)


def write_quotes_csv(
    path: PathLike, quotes: List[VolQuote], T_days: float, convention: DeltaConvention
) -> None:
    """Write x-coordinate quotes with the metadata line."""
    frame = pd.DataFrame(
        {"x": [q.x for q in quotes], "sigma": [q.sigma for q in quotes], "weight": [q.weight for q in quotes]}
    )
    header = f"# T_days={T_days:g} convention={convention.value}\n"
    _write(path, header + frame.to_csv(index=False, lineterminator="\n"))


def read_price_csv(path: PathLike, label: Optional[str] = None) -> PriceSeries:
    """
    Read a ``date,close`` series with ISO dates in ascending order.

    Raises:
        DataFileError: On unparsable rows or the first non-ascending date
    """
    _, body, header_line = _split_metadata(read_text(path))
    frame = _numeric_frame(body, path, header_line, ["close"])
    if "date" not in frame.columns:
        raise DataFileError("missing column 'date'", path, header_line)
    dates = pd.to_datetime(frame["date"].str.strip(), format="%Y-%m-%d", errors="coerce")
    if dates.isna().any():
        index = int(np.flatnonzero(dates.isna().to_numpy())[0])
        raise DataFileError(
            f"invalid ISO date {frame['date'].iloc[index]!r}", path, header_line + 1 + index
        )
    closes = frame["close"].to_numpy(dtype=float)
    if np.any(closes <= 0):
        index = int(np.flatnonzero(closes <= 0)[0])
        raise DataFileError(f"close must be positive, got {closes[index]}", path, header_line + 1 + index)
    stamps = [d.date() for d in dates]
    for i in range(1, len(stamps)):
        if stamps[i] <= stamps[i - 1]:
            raise DataFileError(
                f"dates must be strictly ascending, {stamps[i]} follows {stamps[i - 1]}",
                path,
                header_line + 1 + i,
            )
    try:
        return PriceSeries(label=label or Path(path).stem, timestamps=stamps, closes=closes)
    except ValidationError as e:
        raise DataFileError(f"invalid price series: {e}", path) from e


def write_price_csv(path: PathLike, series: PriceSeries) -> None:
    frame = pd.DataFrame({"date": [d.isoformat() for d in series.timestamps], "close": series.closes})
    _write(path, frame.to_csv(index=False, lineterminator="\n"))


def read_stats_csv(path: PathLike) -> List[HistoricalStats]:
    """Read historical stats written by ``write_stats_csv``; group size defaults to 300."""
    _, body, header_line = _split_metadata(read_text(path))
    numeric = ["lag_days", "group_index", "sigma_H", "mu_H", "rms_residual"]
    frame = _numeric_frame(body, path, header_line, numeric)
    has_size = "subgroup_size" in frame.columns
    stats = []
    for index, row in enumerate(frame.to_dict("records")):
        label = row.get("label")
        try:
            stats.append(
                HistoricalStats(
                    sigma_H=row["sigma_H"],
                    mu_H=row["mu_H"],
                    subgroup_size=int(row["subgroup_size"]) if has_size else 300,
                    lag=row["lag_days"],
                    label="" if pd.isna(label) else str(label),
                    group_index=int(row["group_index"]),
                    rms_residual=row["rms_residual"],
                )
            )
        except (ValidationError, ValueError) as e:
            raise DataFileError(f"invalid stats row: {e}", path, header_line + 1 + index) from e
    if not stats:
        raise DataFileError("stats file has no rows", path)
    return stats


def write_stats_csv(path: PathLike, stats: List[HistoricalStats]) -> None:
    frame = pd.DataFrame(
        [
            [s.label, s.lag, s.group_index, s.sigma_H, s.mu_H, s.rms_residual]
            for s in stats
        ],
        columns=STATS_COLUMNS,
    )
    _write(path, frame.to_csv(index=False, lineterminator="\n"))


def write_density_csv(path: PathLike, grid: DensityGrid) -> None:
    frame = pd.DataFrame(
        {
            "x": grid.xs,
            "pdf": grid.pdf,
            "ccdf": grid.ccdf,
            "negative_flag": grid.negative_mask.astype(int),
        },
        columns=DENSITY_COLUMNS,
    )
    _write(path, frame.to_csv(index=False, lineterminator="\n"))


def write_sweep_csv(path: PathLike, report: SweepReport) -> None:
    """One row per sweep point; failed points leave mu_fit and rel_err empty."""
    frame = pd.DataFrame(
        [[p.g, p.chi, p.rho, p.T_days, p.mu_fit, p.mu_pred, p.rel_err] for p in report.points],
        columns=SWEEP_COLUMNS,
    )
    _write(path, frame.to_csv(index=False, lineterminator="\n"))


def write_text(path: PathLike, text: str) -> None:
    _write(path, text)


def _write(path: PathLike, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise DataFileError(f"cannot write file: {e.strerror}", path) from e
    logger.debug(f"wrote {path}")
