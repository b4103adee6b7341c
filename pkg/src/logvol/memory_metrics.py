"""Volatility-clustering memory of a single series.

The autocorrelation of a (log-)volatility series is cut at the first lag that
falls inside the Bartlett band; below that lag we fit a power-law exponent with
Theil-Sen in log-log space and integrate the ACF with the trapezoid rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

MIN_LENGTH = 100


@dataclass
class MemoryProfile:
    acf: np.ndarray
    l_cut: int
    beta_vol: float
    eta: float
    eta_curve: np.ndarray
    truncated: bool = False
    ticker: str | None = None

    def to_record(self) -> dict:
        beta = None if not np.isfinite(self.beta_vol) else float(self.beta_vol)
        return {"ticker": self.ticker, "l_cut": int(self.l_cut), "beta_vol": beta,
                "eta": float(self.eta), "truncated": bool(self.truncated)}


def acf(series, l_max: int) -> np.ndarray:
    """Sample ACF for lags ``1..l_max``.

    Each lag uses the ``T - L`` overlapping products divided by the sample
    variance. Values are clipped to [-1, 1].
    """
    s = np.asarray(series, dtype=float)
    T = s.size
    l_max = int(l_max)
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    if l_max >= T:
        raise ValueError(f"l_max={l_max} must be smaller than the series length {T}")
    s = s - s.mean()
    var = np.dot(s, s) / T
    if var == 0:
        raise ValueError("constant series has no autocorrelation")
    nfft = 1 << int(np.ceil(np.log2(2 * T)))
    f = np.fft.rfft(s, nfft)
    raw = np.fft.irfft(f * np.conj(f), nfft)[1:l_max + 1]
    lags = np.arange(1, l_max + 1)
    kappa = raw / (T - lags) / var
    return np.clip(kappa, -1.0, 1.0)


def bartlett_cut(kappa, T: int, level: float = 0.05, cumulative: bool = True) -> tuple[int, bool]:
    """First lag whose ACF drops below the Bartlett band.

    Returns ``(l_cut, truncated)``; ``truncated`` is set when every available
    lag is still significant, in which case ``l_cut`` is the last lag.
    """
    k = np.asarray(kappa, dtype=float)
    if k.size == 0:
        raise ValueError("empty ACF")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    z = norm.ppf(1.0 - level / 2.0)
    if cumulative:
        # variance term for lag L uses kappa(1..L-1)
        csum = np.concatenate(([0.0], np.cumsum(k[:-1] ** 2)))
        band = z * np.sqrt((1.0 + 2.0 * csum) / T)
    else:
        band = np.full(k.size, z / np.sqrt(T))
    below = np.flatnonzero(k < band)
    if below.size == 0:
        return int(k.size), True
    return int(below[0]) + 1, False


def theil_sen_slope(x, y) -> float:
    """Median of all pairwise slopes (points with equal x are skipped)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    i, j = np.triu_indices(x.size, k=1)
    dx = x[j] - x[i]
    ok = dx != 0
    if not ok.any():
        raise ValueError("need at least two distinct x values")
    return float(np.median((y[j] - y[i])[ok] / dx[ok]))


def theil_sen_loglog(kappa, fit_range: tuple[int, int] | None = None) -> float:
    """Power-law exponent of ``kappa(L) ~ L**(-beta)`` from positive lags in ``fit_range``.

    ``kappa[0]`` is lag 1. ``fit_range`` is an inclusive lag interval, the
    whole array by default.
    """
    k = np.asarray(kappa, dtype=float)
    lo, hi = fit_range if fit_range is not None else (1, k.size)
    lo = max(1, int(lo))
    hi = min(k.size, int(hi))
    lags = np.arange(lo, hi + 1)
    vals = k[lo - 1:hi]
    pos = vals > 0
    if pos.sum() < 2:
        raise ValueError("fewer than two positive ACF values in the fit range")
    return -theil_sen_slope(np.log(lags[pos]), np.log(vals[pos]))


def eta(kappa, l_cut: int) -> tuple[float, np.ndarray]:
    """Trapezoid integral of the ACF over lags ``1..l_cut``.

    Also returns the running integral for every upper limit ``1..l_cut``; the
    first entry is 0 (empty interval).
    """
    l_cut = int(l_cut)
    if l_cut < 1:
        raise ValueError("l_cut must be >= 1")
    k = np.asarray(kappa, dtype=float)
    if l_cut > k.size:
        raise ValueError(f"l_cut={l_cut} exceeds the {k.size} available lags")
    seg = 0.5 * (k[:l_cut - 1] + k[1:l_cut])
    curve = np.concatenate(([0.0], np.cumsum(seg)))
    return float(curve[-1]), curve


def memory_profile(series, level: float = 0.05, l_max: int | None = None,
                   ticker: str | None = None, cumulative_band: bool = True) -> MemoryProfile:
    """ACF, Bartlett cut, Theil-Sen exponent and integrated proxy of one series.

    ``beta_vol`` is NaN when fewer than two positive ACF values lie below the
    cut (typically white noise, where the cut happens at lag 1).
    """
    s = np.asarray(series, dtype=float)
    T = s.size
    if T < MIN_LENGTH:
        raise ValueError(f"series of length {T} is shorter than {MIN_LENGTH}")
    sd = s.std()
    if sd == 0:
        raise ValueError("constant series")
    s = (s - s.mean()) / sd
    if l_max is None:
        l_max = min(T // 4, 1000)
    kappa = acf(s, l_max)
    l_cut, truncated = bartlett_cut(kappa, T, level, cumulative=cumulative_band)
    try:
        beta = theil_sen_loglog(kappa, (1, l_cut))
    except ValueError:
        beta = float("nan")
    e, curve = eta(kappa, l_cut)
    return MemoryProfile(kappa, l_cut, beta, e, curve, truncated, ticker)


def panel_profiles(panel, tickers=None, **kwargs) -> list[MemoryProfile]:
    panel = np.atleast_2d(np.asarray(panel, dtype=float))
    if tickers is None:
        tickers = [None] * panel.shape[0]
    return [memory_profile(row, ticker=t, **kwargs) for row, t in zip(panel, tickers)]


def panel_eta(panel, **kwargs) -> np.ndarray:
    return np.array([p.eta for p in panel_profiles(panel, **kwargs)])
