"""Price ingestion, calendar alignment and persistence.

The single on-disk format is a delimited file with header ``ticker,date,close``
(ISO dates), one row per observation.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_P = 0.90


class PanelError(ValueError):
    pass


class ParseError(PanelError):
    pass


class ValidationError(PanelError):
    pass


@dataclass
class RawSeries:
    ticker: str
    dates: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.prices = np.asarray(self.prices, dtype=float)
        if self.dates.size == 0 or self.dates.size != self.prices.size:
            raise ValidationError(f"{self.ticker}: dates and prices must be non-empty and aligned")
        if np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise ValidationError(f"{self.ticker}: dates must be strictly increasing")
        if np.any(self.prices <= 0):
            raise ValidationError(f"{self.ticker}: prices must be positive")

    def __len__(self):
        return self.dates.size


@dataclass
class PricePanel:
    tickers: list[str]
    dates: np.ndarray
    prices: np.ndarray
    dropped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.tickers = [str(t) for t in self.tickers]
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.prices = np.asarray(self.prices, dtype=float)
        N, T = self.prices.shape
        if N != len(self.tickers) or T != self.dates.size:
            raise ValidationError("price matrix does not match tickers x dates")
        if N < 2 or T < 2:
            raise ValidationError("a panel needs at least 2 stocks and 2 dates")
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise ValidationError("panel has missing or non-positive prices")

    @property
    def shape(self):
        return self.prices.shape

    def to_series(self) -> list[RawSeries]:
        return [RawSeries(t, self.dates.copy(), row.copy())
                for t, row in zip(self.tickers, self.prices)]

    def subset(self, idx) -> PricePanel:
        idx = list(idx)
        return PricePanel([self.tickers[i] for i in idx], self.dates, self.prices[idx])


def load_prices(source) -> list[RawSeries]:
    """Read ``ticker,date,close`` rows into one sorted series per ticker."""
    rows = defaultdict(dict)
    with open(source, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["ticker", "date", "close"]:
            raise ParseError(f"line 1: expected header 'ticker,date,close', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
            ticker, date_s, close_s = (c.strip() for c in row)
            if not ticker:
                raise ParseError(f"line {lineno}: empty ticker")
            try:
                date = dt.date.fromisoformat(date_s)
            except ValueError:
                raise ParseError(f"line {lineno}: bad date {date_s!r}") from None
            try:
                close = float(close_s)
            except ValueError:
                raise ParseError(f"line {lineno}: bad close {close_s!r}") from None
            if not np.isfinite(close) or close <= 0:
                raise ValidationError(f"line {lineno}: non-positive price {close_s} for {ticker}")
            if date in rows[ticker]:
                raise ValidationError(f"duplicate row for ticker {ticker} on {date.isoformat()}")
            rows[ticker][date] = close
    out = []
    for ticker in sorted(rows):
        obs = sorted(rows[ticker].items())
        out.append(RawSeries(ticker, np.array([d for d, _ in obs], dtype="datetime64[D]"),
                             np.array([p for _, p in obs])))
    return out


def clean_panel(series: list[RawSeries], p: float = DEFAULT_P) -> PricePanel:
    """Align series on a common calendar, dragging the last price over gaps.

    1. drop series shorter than ``p`` times the longest;
    2. start at the first date on which every survivor has been listed;
    3. the calendar is every date (from there on) on which any survivor traded;
    4. gaps take the previous available price, i.e. a zero log-return.
    """
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if not series:
        raise ValidationError("no series to clean")
    longest = max(len(s) for s in series)
    keep = [s for s in series if len(s) >= p * longest]
    dropped = [s.ticker for s in series if len(s) < p * longest]
    if len(keep) < 2:
        raise ValidationError(f"only {len(keep)} series survive the length filter (p={p})")
    start = max(s.dates[0] for s in keep)
    calendar = np.unique(np.concatenate([s.dates[s.dates >= start] for s in keep]))
    prices = np.empty((len(keep), calendar.size))
    for i, s in enumerate(keep):
        # index of the last observation on or before each calendar date
        pos = np.searchsorted(s.dates, calendar, side="right") - 1
        if pos[0] < 0:
            raise ValidationError(f"{s.ticker}: no price on or before {calendar[0]}; "
                                  "refusing to back-fill a leading gap")
        prices[i] = s.prices[pos]
    return PricePanel([s.ticker for s in keep], calendar, prices, dropped)


def write_prices(series_or_panel, path) -> None:
    series = (series_or_panel.to_series() if isinstance(series_or_panel, PricePanel)
              else series_or_panel)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ticker", "date", "close"])
        for s in series:
            for d, px in zip(s.dates, s.prices):
                w.writerow([s.ticker, str(d), repr(float(px))])


def save_panel(panel: PricePanel, path, p: float | None = None) -> Path:
    """Write the panel rows plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    write_prices(panel, path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "n_stocks": len(panel.tickers), "n_dates": int(panel.dates.size),
        "p": p, "dropped_tickers": list(panel.dropped)}, indent=2) + "\n")
    return sidecar


def load_panel(path) -> PricePanel:
    """Read a previously cleaned panel; every ticker must share one calendar."""
    series = load_prices(path)
    if len(series) < 2:
        raise ValidationError("a panel needs at least 2 tickers")
    dates = series[0].dates
    for s in series[1:]:
        if s.dates.size != dates.size or np.any(s.dates != dates):
            raise ValidationError(f"{s.ticker}: calendar differs; run clean_panel first")
    dropped = []
    sidecar = Path(path).with_suffix(".json")
    if sidecar.exists():
        dropped = json.loads(sidecar.read_text()).get("dropped_tickers", [])
    return PricePanel([s.ticker for s in series], dates, np.vstack([s.prices for s in series]),
                      dropped)
