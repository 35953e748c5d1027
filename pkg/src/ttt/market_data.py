"""Twin-bond quotes to the greenium node-difference series.

The greenium of a maturity is the yield spread between the brown (conventional)
and the green zero-coupon bond; the observable ``X_t`` is the short-node
greenium minus the long-node greenium. Year fractions are ACT/365 fixed.
"""

import csv
from dataclasses import dataclass, field
from datetime import date, timedelta
import math

import numpy as np

from .errors import AlignmentError, DomainError, EmptySeriesError, ParseError

QUOTE_COLUMNS = ("quote_date", "isin", "label", "maturity_date", "discount_factor")
SERIES_COLUMNS = ("date", "t_years", "x_value")
DAYS_PER_YEAR = 365.0
DEFAULT_DELTA_BAR = 1.0 / 252.0


@dataclass(frozen=True)
class BondQuote:
    quote_date: date
    isin: str
    label: str
    maturity_date: date
    discount_factor: float

    def __post_init__(self):
        if self.label not in ("green", "brown"):
            raise DomainError(f"label must be green or brown, got {self.label!r}")
        if not 0.0 < self.discount_factor < 1.5:
            raise DomainError(f"discount_factor {self.discount_factor} outside (0, 1.5)")
        if not self.maturity_date > self.quote_date:
            raise DomainError("maturity_date must follow quote_date")


@dataclass(frozen=True)
class GreeniumPoint:
    quote_date: date
    maturity_date: date
    greenium: float


@dataclass(frozen=True, eq=False)
class NodeDiffSeries:
    t0: date
    times: np.ndarray
    values: np.ndarray
    short_maturity: date = None
    long_maturity: date = None
    spacing_h: float = float("nan")
    dates: tuple = ()
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        x = np.asarray(self.values, float)
        if t.shape != x.shape or t.ndim != 1:
            raise DomainError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise DomainError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", x)
        if self.dates and len(self.dates) != t.size:
            raise DomainError("dates and times differ in length")

    def __len__(self):
        return self.times.size

    def time_to_transition(self, deadline_T):
        """Waiting time ``T - t`` for every observation (years)."""
        return deadline_T - self.times


def year_fraction(start, end):
    """ACT/365 fixed."""
    return (end - start).days / DAYS_PER_YEAR


def date_from_years(epoch, t):
    return epoch + timedelta(days=int(round(t * DAYS_PER_YEAR)))


def greenium(discount_brown, discount_green, time_to_maturity):
    """Yield of the brown bond minus yield of the green bond (per year)."""
    for name, val in (("discount_brown", discount_brown),
                      ("discount_green", discount_green),
                      ("time_to_maturity", time_to_maturity)):
        if not val > 0:
            raise DomainError(f"{name} must be positive, got {val}")
    return -(math.log(discount_brown) - math.log(discount_green)) / time_to_maturity


def node_diff(short, long):
    """``X_t``: short-node greenium minus long-node greenium."""
    if short.quote_date != long.quote_date:
        raise AlignmentError(
            f"quote dates differ: {short.quote_date} vs {long.quote_date}")
    return short.greenium - long.greenium


def _parse_date(text, row, column):
    try:
        return date.fromisoformat(text.strip())
    except (ValueError, AttributeError):
        raise ParseError(f"row {row}: bad {column} {text!r}", row=row, column=column) from None


def read_quotes(csv_path):
    """Parse the quote CSV; row numbers in errors count the header as row 1."""
    quotes = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in QUOTE_COLUMNS:
            if col not in header:
                raise ParseError(f"missing column {col!r}", column=col)
        for row_no, row in enumerate(reader, start=2):
            if None in row or any(row[c] is None for c in QUOTE_COLUMNS):
                raise ParseError(f"row {row_no}: wrong number of fields", row=row_no)
            qd = _parse_date(row["quote_date"], row_no, "quote_date")
            md = _parse_date(row["maturity_date"], row_no, "maturity_date")
            try:
                df = float(row["discount_factor"])
            except ValueError:
                raise ParseError(f"row {row_no}: bad discount_factor "
                                 f"{row['discount_factor']!r}", row=row_no,
                                 column="discount_factor") from None
            try:
                quotes.append(BondQuote(qd, row["isin"].strip(), row["label"].strip().lower(),
                                        md, df))
            except DomainError as exc:
                raise ParseError(f"row {row_no}: {exc}", row=row_no) from None
    return quotes


def ingest_quotes(csv_path, short_maturity, long_maturity, day_count="ACT/365"):
    """Build the node-difference series from a quote CSV.

    Dates lacking any of the four legs (green/brown at both maturities) are
    dropped; ``series.report`` lists them.
    """
    if day_count.upper() not in ("ACT/365", "ACT/365F", "ACT/365 FIXED"):
        raise DomainError(f"unsupported day count {day_count!r}")
    if not short_maturity < long_maturity:
        raise AlignmentError("short maturity must precede long maturity")
    legs = {}
    for q in read_quotes(csv_path):
        if q.maturity_date not in (short_maturity, long_maturity):
            continue
        key = (q.quote_date, q.maturity_date, q.label)
        if key in legs:
            raise ParseError(f"duplicate quote for {key[0]} {key[1]} {key[2]}")
        legs[key] = q.discount_factor

    all_dates = sorted({k[0] for k in legs})
    kept, values, dropped = [], [], []
    for d in all_dates:
        need = [(d, m, lab) for m in (short_maturity, long_maturity)
                for lab in ("green", "brown")]
        if not all(k in legs for k in need):
            dropped.append(d)
            continue
        points = []
        for m in (short_maturity, long_maturity):
            g = greenium(legs[(d, m, "brown")], legs[(d, m, "green")], year_fraction(d, m))
            points.append(GreeniumPoint(d, m, g))
        kept.append(d)
        values.append(node_diff(points[0], points[1]))
    if not kept:
        raise EmptySeriesError("no date carries a complete green/brown quartet")
    t0 = kept[0]
    times = np.array([year_fraction(t0, d) for d in kept])
    report = {"n_dates_seen": len(all_dates), "n_kept": len(kept),
              "n_dropped": len(dropped), "dropped_dates": [d.isoformat() for d in dropped]}
    return NodeDiffSeries(t0=t0, times=times, values=np.array(values),
                          short_maturity=short_maturity, long_maturity=long_maturity,
                          spacing_h=year_fraction(short_maturity, long_maturity),
                          dates=tuple(kept), report=report)


def write_series_csv(series, path):
    """Write ``date,t_years,x_value`` with 12 significant digits."""
    dates = series.dates or tuple(date_from_years(series.t0, t) for t in series.times)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(SERIES_COLUMNS) + "\n")
        for d, t, x in zip(dates, series.times, series.values):
            fh.write(f"{d.isoformat()},{t:.12g},{x:.12g}\n")


def read_series_csv(path):
    dates, times, values = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in SERIES_COLUMNS:
            if col not in (reader.fieldnames or []):
                raise ParseError(f"missing column {col!r}", column=col)
        for row_no, row in enumerate(reader, start=2):
            dates.append(_parse_date(row["date"], row_no, "date"))
            try:
                times.append(float(row["t_years"]))
                values.append(float(row["x_value"]))
            except (TypeError, ValueError):
                raise ParseError(f"row {row_no}: bad number", row=row_no) from None
    if not dates:
        raise EmptySeriesError(f"{path} holds no observation")
    return NodeDiffSeries(t0=dates[0], times=np.array(times), values=np.array(values),
                          dates=tuple(dates))


def regularize_grid(series, delta_bar=DEFAULT_DELTA_BAR):
    """Re-time consecutive observations onto the lattice ``t0 + i * delta_bar``.

    This is the business-time reading of a daily model: every quoted date is
    one lattice step after the previous one, weekends and holidays included.
    """
    times = delta_bar * np.arange(len(series))
    return NodeDiffSeries(t0=series.t0, times=times, values=series.values.copy(),
                          short_maturity=series.short_maturity,
                          long_maturity=series.long_maturity, spacing_h=series.spacing_h,
                          dates=series.dates,
                          report={**series.report, "grid": "business", "delta_bar": delta_bar})


def subsample_regular(series, coverage=0.95, max_step_days=31):
    """Keep observations on the finest calendar grid with at least ``coverage`` hit rate.

    Tries steps of 1, 2, ... days from the first date and returns the
    observations falling on grid nodes of the first step whose nodes are
    observed at least ``coverage`` of the time. Unobserved nodes are not filled.
    """
    if not series.dates:
        raise DomainError("subsample_regular needs dated observations")
    observed = set(series.dates)
    first, last = series.dates[0], series.dates[-1]
    span = (last - first).days
    for step in range(1, max_step_days + 1):
        nodes = [first + timedelta(days=k * step) for k in range(span // step + 1)]
        hits = [d for d in nodes if d in observed]
        if len(hits) >= coverage * len(nodes):
            pos = {d: i for i, d in enumerate(series.dates)}
            idx = [pos[d] for d in hits]
            return NodeDiffSeries(
                t0=series.t0, times=series.times[idx], values=series.values[idx],
                short_maturity=series.short_maturity, long_maturity=series.long_maturity,
                spacing_h=series.spacing_h, dates=tuple(hits),
                report={**series.report, "grid": "calendar", "step_days": step,
                        "coverage": len(hits) / len(nodes)})
    raise DomainError(f"no calendar step up to {max_step_days} days reaches "
                      f"{coverage:.0%} coverage")
