"""PCA and exploratory factor-analysis baselines for residual memory.

Both models are fitted on the correlation matrix ``E = omega omega^T / T`` of
the standardized log-volatility panel and leave a residual panel whose
memory can be compared with the cluster model's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory_metrics import memory_profile

PAF_TOL = 1e-6
PAF_MAX_ITER = 200
HEYWOOD_CAP = 1.0 - 1e-6
VARIMAX_TOL = 1e-10
VARIMAX_MAX_ITER = 1000


@dataclass
class LoadingMatrix:
    loadings: np.ndarray
    uniquenesses: np.ndarray | None = None
    heywood: bool = False
    iterations: int = 0

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def communalities(self) -> np.ndarray:
        return (self.loadings ** 2).sum(axis=1)


def _panel_corr(omega) -> np.ndarray:
    X = np.asarray(omega, dtype=float)
    E = X @ X.T / X.shape[1]
    return 0.5 * (E + E.T)


def _top_eigen(E, F):
    vals, vecs = np.linalg.eigh(E)
    order = np.argsort(vals)[::-1][:F]
    vecs = vecs[:, order]
    # sign convention: each component has a non-negative entry sum
    signs = np.where(vecs.sum(axis=0) < 0, -1.0, 1.0)
    return vals[order], vecs * signs


def pca_residual_panel(omega, n_components: int) -> tuple[np.ndarray, LoadingMatrix]:
    """Residual of each row after projecting the panel on the top principal components.

    Returns the residual panel and the orthonormal component vectors
    (N x F) as a ``LoadingMatrix``.
    """
    X = np.asarray(omega, dtype=float)
    N = X.shape[0]
    if not 1 <= n_components < N:
        raise ValueError(f"n_components must lie in [1, {N - 1}]")
    _, V = _top_eigen(_panel_corr(X), n_components)
    scores = V.T @ X
    return X - V @ scores, LoadingMatrix(V)


def varimax(loadings, tol: float = VARIMAX_TOL, max_iter: int = VARIMAX_MAX_ITER,
            return_history: bool = False):
    """Orthogonal rotation maximizing the variance of squared loadings per column.

    Uses the usual SVD iteration. Returns ``(rotated, rotation)`` and, on
    request, the criterion value after every sweep.
    """
    L = np.asarray(loadings, dtype=float)
    n, k = L.shape
    R = np.eye(k)
    history = [varimax_criterion(L)]
    if k > 1:
        d = 0.0
        for _ in range(max_iter):
            Lr = L @ R
            u, s, vt = np.linalg.svd(L.T @ (Lr ** 3 - Lr @ np.diag((Lr ** 2).sum(axis=0)) / n))
            R = u @ vt
            history.append(varimax_criterion(L @ R))
            d_new = s.sum()
            if d > 0 and d_new < d * (1.0 + tol):
                break
            d = d_new
    rotated = L @ R
    if return_history:
        return rotated, R, np.array(history)
    return rotated, R


def varimax_criterion(L) -> float:
    """Sum over columns of the variance of squared loadings."""
    L2 = np.asarray(L, dtype=float) ** 2
    return float((L2.var(axis=0)).sum())


def principal_axis(E, n_factors: int, tol: float = PAF_TOL,
                   max_iter: int = PAF_MAX_ITER) -> LoadingMatrix:
    """Iterated principal-axis factoring of a correlation matrix.

    Communalities start at each row's largest absolute off-diagonal
    correlation. Values above one (Heywood cases) are capped and flagged.
    """
    E = np.asarray(E, dtype=float)
    N = E.shape[0]
    off = np.abs(E - np.diag(np.diag(E)))
    h2 = off.max(axis=1)
    heywood = False
    it = 0
    for it in range(1, max_iter + 1):
        R = E.copy()
        np.fill_diagonal(R, h2)
        vals, vecs = _top_eigen(R, n_factors)
        L = vecs * np.sqrt(np.clip(vals, 0.0, None))
        new = (L ** 2).sum(axis=1)
        if np.any(new > 1.0):
            heywood = True
            new = np.minimum(new, HEYWOOD_CAP)
        done = np.max(np.abs(new - h2)) < tol
        h2 = new
        if done:
            break
    # rescale rows that were capped so that communalities match h2
    comm = (L ** 2).sum(axis=1)
    over = comm > HEYWOOD_CAP
    if np.any(over):
        L[over] *= np.sqrt(HEYWOOD_CAP / comm[over])[:, None]
    return LoadingMatrix(L, 1.0 - (L ** 2).sum(axis=1), heywood, it)


def regression_scores(L: LoadingMatrix, omega) -> np.ndarray:
    """Thomson regression scores ``L^T (L L^T + Psi)^-1 omega`` (F x T)."""
    lam = L.loadings
    psi = np.clip(L.uniquenesses, 1e-6, None)
    # (I + L^T Psi^-1 L)^-1 L^T Psi^-1 is the same map, with an F x F solve
    lt_pinv = lam.T / psi
    M = np.eye(lam.shape[1]) + lt_pinv @ lam
    return np.linalg.solve(M, lt_pinv @ np.asarray(omega, dtype=float))


def fa_fit_varimax(omega, n_factors: int) -> tuple[LoadingMatrix, np.ndarray]:
    """Principal-axis factor analysis with varimax rotation.

    Returns the rotated loadings and the residual panel
    ``omega - loadings @ scores``.
    """
    X = np.asarray(omega, dtype=float)
    N = X.shape[0]
    if not 1 <= n_factors < N / 2:
        raise ValueError(f"n_factors must satisfy 1 <= F < N/2 = {N / 2}")
    base = principal_axis(_panel_corr(X), n_factors)
    rotated, _ = varimax(base.loadings)
    fit = LoadingMatrix(rotated, 1.0 - (rotated ** 2).sum(axis=1), base.heywood, base.iterations)
    scores = regression_scores(fit, X)
    return fit, X - rotated @ scores


@dataclass
class ResidualCdf:
    fractions: np.ndarray
    shares: np.ndarray
    included: np.ndarray
    model: str = ""

    def share_below(self, x: float) -> float:
        """Share of included stocks whose residual-memory fraction is at most ``x``."""
        if self.fractions.size == 0:
            return float("nan")
        return float(np.searchsorted(self.fractions, x, side="right") / self.fractions.size)

    def quantile(self, q: float) -> float:
        """Smallest fraction reached by at least a share ``q`` of stocks."""
        k = int(np.ceil(q * self.fractions.size)) - 1
        return float(self.fractions[max(k, 0)])

    def rows(self) -> list[tuple[float, float, str]]:
        return [(float(f), float(s), self.model) for f, s in zip(self.fractions, self.shares)]


def residual_eta(residuals, level: float = 0.05) -> np.ndarray:
    out = []
    for row in np.atleast_2d(residuals):
        if row.std() <= 1e-12:
            out.append(0.0)
        else:
            out.append(memory_profile(row, level=level).eta)
    return np.array(out)


def residual_memory_cdf(residuals, baseline_eta, model: str = "",
                        level: float = 0.05) -> ResidualCdf:
    """Empirical CDF of ``eta(residual) / eta_PL`` over stocks with positive baseline.

    Fractions are floored at zero.
    """
    base = np.asarray(baseline_eta, dtype=float)
    eta_res = residual_eta(residuals, level)
    ok = base > 0
    frac = np.sort(np.clip(eta_res[ok] / base[ok], 0.0, None))
    shares = np.arange(1, frac.size + 1) / max(frac.size, 1)
    return ResidualCdf(frac, shares, np.flatnonzero(ok), model)


def cdf_from_fractions(fractions, model: str = "") -> ResidualCdf:
    f = np.asarray(fractions, dtype=float)
    ok = np.isfinite(f)
    frac = np.sort(np.clip(f[ok], 0.0, None))
    return ResidualCdf(frac, np.arange(1, frac.size + 1) / max(frac.size, 1),
                       np.flatnonzero(ok), model)
