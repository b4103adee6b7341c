"""OLS with coefficient tests and cross-validated elastic-net regression.

The elastic-net objective is

    (1/T) * sum_t (y_t - b0 - x_t . beta)**2
        + lam * sum_j ((1 - a) * beta_j**2 / 2 + a * |beta_j|)

with an unpenalized intercept ``b0``. Coordinate descent runs on the Gram
matrix of the centered design, so one sweep costs O(M^2) regardless of T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

TOL = 1e-7
MAX_SWEEPS = 100_000
DEFAULT_A_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
N_LAMBDA = 50
LAMBDA_RATIO = 1e-4
# sweeps between exact active-set attempts
ACTIVE_SET_EVERY = 3


class ConvergenceError(RuntimeError):
    """Coordinate descent hit the sweep cap; ``last_iterate`` holds the betas."""

    def __init__(self, message, last_iterate):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass
class OlsFit:
    beta: float
    alpha: float
    p_beta: float
    p_alpha: float
    residuals: np.ndarray


@dataclass
class ElasticNetFit:
    betas: np.ndarray
    intercept: float
    a: float
    lam: float
    cv_error: float
    p_values: np.ndarray | None = None
    cv_table: np.ndarray | None = field(default=None, repr=False)

    def to_record(self, stock=None) -> dict:
        pv = None if self.p_values is None else [float(p) for p in self.p_values]
        return {"stock": stock, "betas": [float(b) for b in self.betas],
                "intercept": float(self.intercept), "a": float(self.a),
                "lambda": float(self.lam), "cv_error": float(self.cv_error),
                "p_values": pv}


def _two_sided_p(coef, se, dof):
    if se == 0:
        return 0.0 if coef != 0 else 1.0
    return float(2.0 * stats.t.sf(abs(coef / se), dof))


def ols_fit(y, x) -> OlsFit:
    """Simple linear regression ``y = beta * x + alpha + residual`` with t-tests."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("y and x must be 1-D arrays of equal length")
    T = y.size
    if T < 3:
        raise ValueError("need at least 3 observations")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = np.dot(dx, dx)
    if sxx == 0:
        raise ValueError("regressor is constant")
    beta = np.dot(dx, y - ym) / sxx
    alpha = ym - beta * xm
    resid = y - alpha - beta * x
    resid -= resid.mean()
    dof = T - 2
    s2 = np.dot(resid, resid) / dof
    p_beta = _two_sided_p(beta, np.sqrt(s2 / sxx), dof)
    p_alpha = _two_sided_p(alpha, np.sqrt(s2 * (1.0 / T + xm * xm / sxx)), dof)
    return OlsFit(float(beta), float(alpha), p_beta, p_alpha, resid)


@numba.njit(cache=True, nogil=True)
def _objective(G, c, yy, beta, a, lam):
    quad = 0.0
    lin = 0.0
    pen = 0.0
    m = beta.size
    for j in range(m):
        lin += c[j] * beta[j]
        pen += (1.0 - a) * beta[j] * beta[j] / 2.0 + a * abs(beta[j])
        for k in range(m):
            quad += beta[j] * G[j, k] * beta[k]
    return yy - 2.0 * lin + quad + lam * pen


@numba.njit(cache=True, nogil=True)
def _sweep(G, c, beta, l1, l2):
    m = beta.size
    delta = 0.0
    for j in range(m):
        denom = G[j, j] + l2
        z = c[j]
        for k in range(m):
            if k != j:
                z -= G[j, k] * beta[k]
        if z > l1:
            new = (z - l1) / denom if denom > 0 else 0.0
        elif z < -l1:
            new = (z + l1) / denom if denom > 0 else 0.0
        else:
            new = 0.0
        d = abs(new - beta[j])
        if d > delta:
            delta = d
        beta[j] = new
    return delta


@numba.njit(cache=True, nogil=True)
def _active_set_step(G, c, beta, l1, l2):
    """Exact minimizer for the current support and signs, if it is consistent.

    Returns True and overwrites ``beta`` when the candidate keeps every sign
    and satisfies the KKT bound on the inactive coordinates. On a sign
    conflict ``beta`` moves part of the way and False is returned.
    """
    m = beta.size
    n_act = 0
    for j in range(m):
        # without an L1 term every coordinate is free
        if beta[j] != 0.0 or l1 == 0.0:
            n_act += 1
    if n_act == 0:
        return False
    idx = np.empty(n_act, dtype=np.int64)
    n_act = 0
    for j in range(m):
        if beta[j] != 0.0 or l1 == 0.0:
            idx[n_act] = j
            n_act += 1
    A = np.empty((n_act, n_act))
    b = np.empty(n_act)
    for p in range(n_act):
        j = idx[p]
        b[p] = c[j] - l1 * np.sign(beta[j])
        for q in range(n_act):
            A[p, q] = G[j, idx[q]]
        A[p, p] += l2
    # reject near-singular systems; coordinate descent handles those
    if np.linalg.cond(A) > 1e12:
        return False
    sol = np.linalg.solve(A, b)
    if l1 > 0.0:
        # on a sign change, walk toward the candidate until the first
        # coordinate reaches zero; the objective decreases along the way
        t = 2.0
        hit = -1
        for p in range(n_act):
            bp = beta[idx[p]]
            if np.sign(sol[p]) != np.sign(bp):
                frac = bp / (bp - sol[p])
                if frac < t:
                    t = frac
                    hit = idx[p]
        if hit >= 0:
            for p in range(n_act):
                j = idx[p]
                beta[j] = beta[j] + t * (sol[p] - beta[j])
            beta[hit] = 0.0
            return False
    cand = np.zeros(m)
    for p in range(n_act):
        cand[idx[p]] = sol[p]
    slack = 1e-12 * (1.0 + l1)
    for j in range(m):
        if cand[j] == 0.0:
            z = c[j]
            for k in range(m):
                z -= G[j, k] * cand[k]
            if abs(z) > l1 + slack:
                return False
    for j in range(m):
        beta[j] = cand[j]
    return True


@numba.njit(cache=True, nogil=True)
def _cd(G, c, yy, a, lam, beta, tol, max_sweeps, trace):
    """In-place coordinate descent; returns (sweeps, converged).

    Every few sweeps the exact solution on the current support is tried,
    which removes the slow tail of plain coordinate descent on correlated
    predictors.
    """
    l1 = lam * a / 2.0
    l2 = lam * (1.0 - a) / 2.0
    for sweep in range(max_sweeps):
        if sweep > 0 and sweep % ACTIVE_SET_EVERY == 0:
            before = _objective(G, c, yy, beta, a, lam)
            saved = beta.copy()
            if _active_set_step(G, c, beta, l1, l2):
                if _objective(G, c, yy, beta, a, lam) > before:
                    beta[:] = saved
        delta = _sweep(G, c, beta, l1, l2)
        if trace.size > 0 and sweep < trace.size:
            trace[sweep] = _objective(G, c, yy, beta, a, lam)
        if delta < tol:
            return sweep + 1, True
    return max_sweeps, False


@numba.njit(cache=True, nogil=True)
def _path(G, c, yy, a, lams, tol, max_sweeps):
    m = c.size
    out = np.zeros((lams.size, m))
    beta = np.zeros(m)
    ok = True
    empty = np.zeros(0)
    for i in range(lams.size):
        _, conv = _cd(G, c, yy, a, lams[i], beta, tol, max_sweeps, empty)
        ok = ok and conv
        out[i] = beta
    return out, ok


def _moments(y, X):
    T = y.size
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    return Xc.T @ Xc / T, Xc.T @ yc / T, float(yc @ yc / T), xm, ym


def _check_design(y, X):
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if y.ndim != 1 or X.shape[0] != y.size:
        raise ValueError("X must be T x M with T = len(y)")
    if y.size < 2:
        raise ValueError("need at least 2 observations")
    return y, X


def elastic_net_solve(y, X, a: float, lam: float, tol: float = TOL,
                      max_sweeps: int = MAX_SWEEPS, beta0=None,
                      return_trace: bool = False):
    """Minimize the elastic-net objective for fixed ``(a, lam)``.

    Returns ``(betas, intercept)``, plus the per-sweep objective values when
    ``return_trace`` is set. ``a=0`` is ridge, ``a=1`` is the lasso.
    """
    y, X = _check_design(y, X)
    if not 0.0 <= a <= 1.0:
        raise ValueError("mixing parameter a must be in [0, 1]")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    G, c, yy, xm, ym = _moments(y, X)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    trace = np.zeros(min(max_sweeps, 100_000) if return_trace else 0)
    sweeps, conv = _cd(G, c, yy, float(a), float(lam), beta, tol, max_sweeps, trace)
    if not conv:
        raise ConvergenceError(f"no convergence after {max_sweeps} sweeps", beta.copy())
    intercept = float(ym - xm @ beta)
    if return_trace:
        return beta, intercept, trace[:sweeps]
    return beta, intercept


def lambda_max(y, X) -> float:
    """Smallest lambda that zeroes every coefficient of the lasso (a=1)."""
    y, X = _check_design(y, X)
    _, c, _, _, _ = _moments(y, X)
    return float(2.0 * np.max(np.abs(c))) if c.size else 0.0


def default_lambda_grid(y, X, n: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    lmax = lambda_max(y, X)
    if lmax <= 0:
        lmax = 1e-8
    return np.geomspace(lmax, lmax * ratio, n)


def _fold_slices(T, folds):
    edges = np.linspace(0, T, folds + 1).round().astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(folds)]


def elastic_net_cv(y, X, a_grid=DEFAULT_A_GRID, lambda_grid=None, folds: int = 10,
                   tol: float = TOL, max_sweeps: int = MAX_SWEEPS) -> ElasticNetFit:
    """Pick ``(a, lam)`` by contiguous-block K-fold CV, then refit on all data.

    Ties in CV error go to the larger ``lam`` and then the larger ``a``.
    """
    y, X = _check_design(y, X)
    T = y.size
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if T // folds < 2:
        raise ValueError(f"fold size {T // folds} < 2")
    a_grid = np.asarray(list(a_grid), dtype=float)
    lams = (default_lambda_grid(y, X) if lambda_grid is None
            else np.asarray(list(lambda_grid), dtype=float))
    if a_grid.size == 0 or lams.size == 0:
        raise ValueError("empty hyperparameter grid")
    # fit the path from the largest lambda down for warm starts
    order = np.argsort(-lams, kind="stable")
    lams_desc = lams[order]

    sse = np.zeros((a_grid.size, lams.size))
    for sl in _fold_slices(T, folds):
        train = np.ones(T, dtype=bool)
        train[sl] = False
        G, c, yy, xm, ym = _moments(y[train], X[train])
        Xte, yte = X[sl], y[sl]
        for ia, a in enumerate(a_grid):
            path, ok = _path(G, c, yy, float(a), lams_desc, tol, max_sweeps)
            if not ok:
                raise ConvergenceError("no convergence inside cross-validation", path[-1])
            pred = ym + (Xte - xm) @ path.T
            sse[ia, order] += ((yte[:, None] - pred) ** 2).sum(axis=0)
    cv = sse / T

    best = None
    for ia in range(a_grid.size):
        for il in range(lams.size):
            key = (cv[ia, il], -lams[il], -a_grid[ia])
            if best is None or key < best[0]:
                best = (key, ia, il)
    _, ia, il = best
    a, lam = float(a_grid[ia]), float(lams[il])

    G, c, yy, xm, ym = _moments(y, X)
    warm = lams_desc[lams_desc >= lam]
    path, ok = _path(G, c, yy, a, warm, tol, max_sweeps)
    if not ok:
        raise ConvergenceError("no convergence on the full-sample refit", path[-1])
    beta = path[-1].copy()
    return ElasticNetFit(beta, float(ym - xm @ beta), a, lam, float(cv[ia, il]),
                         cv_table=cv)


def circular_shifts(T: int, n_perm: int) -> np.ndarray:
    """Evenly spread non-zero circular shifts in ``[1, T - 1]``."""
    if n_perm >= T:
        raise ValueError("more permutations than distinct circular shifts")
    return np.unique(np.round(np.arange(1, n_perm + 1) * T / (n_perm + 1)).astype(int))


def predictor_significance(fit: ElasticNetFit, y, X, n_perm: int = 99,
                           tol: float = TOL, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Circular-shift permutation p-values for each selected predictor.

    Each selected column is rotated in time (keeping its autocorrelation) and
    the model is refit at the chosen ``(a, lam)``; the p-value is the share of
    shifts whose ``|beta|`` reaches the observed one, with a +1 correction.
    Unselected predictors get p = 1.
    """
    y, X = _check_design(y, X)
    if n_perm < 99:
        raise ValueError("n_perm must be >= 99")
    T, M = X.shape
    shifts = circular_shifts(T, n_perm)
    G, c, yy, xm, _ = _moments(y, X)
    Xc = X - xm
    yc = y - y.mean()
    pvals = np.ones(M)
    empty = np.zeros(0)
    for j in range(M):
        obs = abs(fit.betas[j])
        if obs == 0:
            continue
        hits = 0
        Gp = G.copy()
        cp = c.copy()
        for s in shifts:
            xj = np.roll(Xc[:, j], s)
            col = Xc.T @ xj / T
            col[j] = xj @ xj / T
            Gp[:, j] = col
            Gp[j, :] = col
            cp[j] = xj @ yc / T
            beta = fit.betas.copy()
            _, conv = _cd(Gp, cp, yy, fit.a, fit.lam, beta, tol, max_sweeps, empty)
            if not conv:
                raise ConvergenceError("no convergence in a permutation refit", beta)
            if abs(beta[j]) >= obs:
                hits += 1
        pvals[j] = (hits + 1) / (len(shifts) + 1)
    return pvals
