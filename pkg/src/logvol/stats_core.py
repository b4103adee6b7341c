"""Statistical kernels shared across the pipeline.

Correlation matrices of standardized panels, rank tests, robust location and
scale, hypergeometric over-representation and the two weighting schemes used
to build market and cluster modes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

STANDARDIZATION_TOL = 1e-8


class StandardizationError(ValueError):
    """Raised when a panel row is not zero-mean / unit-variance."""


@dataclass(frozen=True)
class CorrelationMatrix:
    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("correlation values must be a square matrix")
        if len(self.labels) != values.shape[0]:
            raise ValueError("labels do not match matrix size")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    scheme: str

    def __post_init__(self):
        if self.scheme not in ("eigen", "equal"):
            raise ValueError(f"unknown weighting scheme {self.scheme!r}")
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))


def standardize_rows(x: np.ndarray) -> np.ndarray:
    """Z-score each row using the population (1/T) variance."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    if np.any(sd == 0):
        bad = np.flatnonzero(np.atleast_1d(sd.squeeze(-1)) == 0)
        raise StandardizationError(f"zero variance in row(s) {bad.tolist()}")
    return (x - mu) / sd


def check_standardized(panel: np.ndarray, labels: Sequence[str] | None = None,
                       tol: float = STANDARDIZATION_TOL) -> None:
    mean = panel.mean(axis=1)
    var = panel.var(axis=1)
    bad = np.flatnonzero((np.abs(mean) > tol) | (np.abs(var - 1.0) > tol))
    if bad.size:
        i = int(bad[0])
        name = labels[i] if labels is not None else str(i)
        raise StandardizationError(
            f"row {name} is not standardized (mean={mean[i]:.3g}, var={var[i]:.3g})")


def correlation(panel: np.ndarray, labels: Sequence[str] | None = None) -> CorrelationMatrix:
    """Equal-time correlation ``(1/T) X X^T`` of a row-standardized panel.

    The diagonal is reset to exactly one and entries are clipped to [-1, 1] to
    absorb rounding.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2 or panel.shape[1] < 2:
        raise ValueError("panel must be N x T with T >= 2")
    if labels is None:
        labels = [str(i) for i in range(panel.shape[0])]
    check_standardized(panel, labels)
    T = panel.shape[1]
    values = panel @ panel.T / T
    values = 0.5 * (values + values.T)
    np.clip(values, -1.0, 1.0, out=values)
    np.fill_diagonal(values, 1.0)
    return CorrelationMatrix(tuple(labels), values)


def avg_cross_correlation(E: CorrelationMatrix, i: int) -> float:
    """Mean of row ``i`` of ``E`` excluding the diagonal."""
    n = E.n
    if n < 2:
        raise ValueError("need at least two stocks")
    if not 0 <= i < n:
        raise IndexError(f"stock index {i} out of range for N={n}")
    row = E.values[i]
    return float((row.sum() - row[i]) / (n - 1))


def avg_cross_correlations(E: CorrelationMatrix) -> np.ndarray:
    v = E.values
    return (v.sum(axis=1) - np.diag(v)) / (E.n - 1)


def spearman(x, y, alternative: str = "two_sided") -> tuple[float, float]:
    """Spearman rank correlation with a Student-t p-value (n - 2 dof).

    ``alternative`` is one of ``two_sided``, ``greater`` or ``less``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant input: ranks are degenerate")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = min(1.0, max(-1.0, rho))
    dof = n - 2
    if abs(rho) == 1.0:
        t = np.inf if rho > 0 else -np.inf
    else:
        t = rho * np.sqrt(dof / ((1.0 - rho) * (1.0 + rho)))
    if alternative == "two_sided":
        p = 2.0 * stats.t.sf(abs(t), dof)
    elif alternative == "greater":
        p = stats.t.sf(t, dof)
    elif alternative == "less":
        p = stats.t.cdf(t, dof)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return rho, float(min(1.0, p))


def median_mad(values) -> tuple[float, float]:
    """Median and median absolute deviation (unscaled)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("median_mad of empty input")
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def hypergeometric_enrichment(N: int, K_s: int, n: int, x: int) -> float:
    """P[X >= x] for X ~ Hypergeometric(population N, K_s successes, n draws).

    Summed in log space, so populations up to millions are fine.
    """
    N, K_s, n, x = int(N), int(K_s), int(n), int(x)
    if min(N, K_s, n, x) < 0 or K_s > N or n > N:
        raise ValueError(f"impossible hypergeometric parameters N={N}, K_s={K_s}, n={n}")
    lo = max(0, n - (N - K_s))
    hi = min(K_s, n)
    if x > hi:
        raise ValueError(f"overlap x={x} exceeds min(K_s, n)={hi}")
    if x <= lo:
        return 1.0
    k = np.arange(x, hi + 1, dtype=float)
    logp = _log_comb(K_s, k) + _log_comb(N - K_s, n - k) - _log_comb(N, n)
    return float(min(1.0, np.exp(logsumexp(logp))))


def leading_eigenvector(C: CorrelationMatrix | np.ndarray, tol: float = 1e-8) -> tuple[float, WeightVector]:
    """Largest eigenvalue and its unit eigenvector, sign-fixed to a non-negative sum."""
    values = C.values if isinstance(C, CorrelationMatrix) else np.asarray(C, dtype=float)
    if not np.allclose(values, values.T, atol=1e-12):
        raise ValueError("matrix is not symmetric")
    try:
        evals, evecs = np.linalg.eigh(values)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigensolver did not converge") from exc
    lam = float(evals[-1])
    v = evecs[:, -1].copy()
    if v.sum() < 0:
        v = -v
    resid = np.max(np.abs(values @ v - lam * v))
    if resid > tol * max(1.0, abs(lam)):
        raise RuntimeError(f"eigen residual {resid:.3g} exceeds tolerance")
    return lam, WeightVector(v, "eigen")


def equal_weights(n: int) -> WeightVector:
    return WeightVector(np.full(n, 1.0 / n), "equal")


def cluster_submatrix(G: CorrelationMatrix, members) -> CorrelationMatrix:
    idx = np.asarray(list(members), dtype=int)
    if idx.size == 0:
        raise ValueError("empty member set")
    if idx.min() < 0 or idx.max() >= G.n:
        raise IndexError("member index out of range")
    return CorrelationMatrix(tuple(G.labels[i] for i in idx), G.values[np.ix_(idx, idx)])


def save_correlation(C: CorrelationMatrix, path: str | Path, order=None) -> None:
    """Write a labelled matrix (row and column headers), optionally reordered."""
    idx = np.arange(C.n) if order is None else np.asarray(order, dtype=int)
    labels = [C.labels[i] for i in idx]
    vals = C.values[np.ix_(idx, idx)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + labels)
        for lab, row in zip(labels, vals):
            w.writerow([lab] + [repr(float(v)) for v in row])


def load_correlation(path: str | Path) -> CorrelationMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return CorrelationMatrix(tuple(labels), values)
