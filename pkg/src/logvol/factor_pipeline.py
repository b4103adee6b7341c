"""Market / cluster / interaction decomposition of log-volatilities.

Pipeline, per stock ``i``::

    omega_i = beta_i0 * I_0 + alpha_i0 + c_i                      (market OLS)
    c_i     = b_i + sum_k beta_ik * I_k + eps_i                     (joint elastic net)

``I_0`` is a weighted sum of the ``omega`` rows and ``I_k`` a weighted sum of
the (standardized) market residuals of cluster ``k``. Memory is measured with
the integrated ACF at four stages: plain, market removed, own cluster removed
and everything removed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import stats_core as sc
from .dbht import Clustering, cluster_correlation
from .memory_metrics import memory_profile
from .panel_io import PricePanel
from .regression import (DEFAULT_A_GRID, LAMBDA_RATIO, N_LAMBDA, ElasticNetFit, OlsFit,
                         default_lambda_grid, elastic_net_cv, ols_fit, predictor_significance)

STAGES = ("PL", "MM", "CM", "IM")
RATIOS = ("market", "cluster", "interaction")
FRACTIONS = ("market", "cluster", "interac", "resid")
# a group stage is judged only when this share of its stocks has a defined ratio
MIN_DEFINED_SHARE = 0.5


class TransformError(ValueError):
    pass


# -- transforms ---------------------------------------------------------------

def log_returns(panel: PricePanel, standardize: bool = True) -> np.ndarray:
    """Row-wise ``ln p(t+1) - ln p(t)``, z-scored unless ``standardize`` is off.

    Cells with an exactly zero raw return (a dragged price) stay exactly zero
    after z-scoring so that the log-volatility transform can clamp them.
    """
    prices = np.asarray(panel.prices, dtype=float)
    if np.any(prices <= 0):
        raise TransformError("prices must be positive")
    r = np.diff(np.log(prices), axis=1)
    if not standardize:
        return r
    sd = r.std(axis=1)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        names = [panel.tickers[i] for i in flat]
        raise TransformError(f"zero return variance for {', '.join(names)}")
    z = (r - r.mean(axis=1, keepdims=True)) / sd[:, None]
    z[r == 0] = 0.0
    return z


@dataclass
class LogVolPanel:
    tickers: list[str]
    omega: np.ndarray
    floor_count: np.ndarray
    # mean and sd of ln|r| before standardization
    log_mean: np.ndarray = field(default=None, repr=False)
    log_std: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.omega.shape

    def window(self, start: int, end: int) -> LogVolPanel:
        """Re-standardized sub-panel on columns ``start:end``."""
        w = self.omega[:, start:end]
        return LogVolPanel(self.tickers, sc.standardize_rows(w),
                           np.zeros(len(self.tickers), dtype=int))


def log_abs_transform(returns, tickers=None) -> LogVolPanel:
    """Standardized ``ln|r|`` with zero returns clamped to the row's smallest nonzero ``|r|``."""
    r = np.atleast_2d(np.asarray(returns, dtype=float))
    N = r.shape[0]
    tickers = [str(i) for i in range(N)] if tickers is None else list(tickers)
    a = np.abs(r)
    zero = a == 0
    floor_count = zero.sum(axis=1)
    for i in np.flatnonzero(floor_count):
        nz = a[i][~zero[i]]
        if nz.size == 0:
            raise TransformError(f"{tickers[i]}: every return is zero")
        a[i, zero[i]] = nz.min()
    logs = np.log(a)
    mu = logs.mean(axis=1)
    sd = logs.std(axis=1)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        raise TransformError(f"constant |return| for {', '.join(tickers[i] for i in flat)}")
    omega = (logs - mu[:, None]) / sd[:, None]
    return LogVolPanel(tickers, omega, floor_count, mu, sd)


# -- modes --------------------------------------------------------------------

@dataclass
class ModeSeries:
    kind: str
    values: np.ndarray
    weights: sc.WeightVector
    members: np.ndarray
    cluster: int = 0

    def leave_one_out(self, rows: np.ndarray, i: int) -> np.ndarray:
        """Mode values without member ``i``; ``rows`` are the series the mode was built from.

        Equal weights are re-normalized over the remaining members. A
        singleton cluster leaves a zero series.
        """
        pos = np.flatnonzero(self.members == i)
        if pos.size == 0:
            return self.values
        j = int(pos[0])
        if self.members.size == 1:
            return np.zeros_like(self.values)
        w = self.weights.weights
        others = np.delete(self.members, j)
        if self.weights.scheme == "equal":
            return rows[others].mean(axis=0)
        return np.delete(w, j) @ rows[others]


def mode_weights(C, scheme: str) -> sc.WeightVector:
    if scheme == "equal":
        return sc.equal_weights(C.n if isinstance(C, sc.CorrelationMatrix) else len(C))
    if scheme == "eigen":
        if C.n == 1:
            return sc.WeightVector(np.ones(1), "eigen")
        return sc.leading_eigenvector(C)[1]
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def market_mode(panel: LogVolPanel, scheme: str = "eigen",
                E: sc.CorrelationMatrix | None = None) -> ModeSeries:
    """``I_0(t) = sum_i xi_i omega_i(t)``; eigen weights come from the leading eigenvector of E."""
    if scheme == "eigen" and E is None:
        E = sc.correlation(panel.omega, panel.tickers)
    w = mode_weights(E if scheme == "eigen" else np.arange(len(panel.tickers)), scheme)
    members = np.arange(len(panel.tickers))
    return ModeSeries("market", w.weights @ panel.omega, w, members)


@dataclass
class MarketRemoval:
    residuals: np.ndarray
    scale: np.ndarray
    fits: list[OlsFit] = field(repr=False)

    @property
    def standardized(self) -> np.ndarray:
        return self.residuals / self.scale[:, None]

    @property
    def beta(self) -> np.ndarray:
        return np.array([f.beta for f in self.fits])

    @property
    def alpha(self) -> np.ndarray:
        return np.array([f.alpha for f in self.fits])


def remove_market(panel: LogVolPanel, mode: ModeSeries) -> MarketRemoval:
    """OLS of every ``omega_i`` on ``I_0``; residual scales are kept for bookkeeping.

    Rows fitted exactly by the mode get scale 1 so that the standardized
    residual stays zero rather than undefined.
    """
    if mode.values.size != panel.omega.shape[1]:
        raise ValueError("mode length does not match the panel")
    fits = [ols_fit(row, mode.values) for row in panel.omega]
    res = np.vstack([f.residuals for f in fits])
    scale = res.std(axis=1)
    scale[scale <= 1e-12 * max(1.0, float(np.abs(panel.omega).max()))] = 1.0
    return MarketRemoval(res, scale, fits)


def cluster_modes(c_std: np.ndarray, clustering: Clustering, scheme: str = "eigen",
                  G: sc.CorrelationMatrix | None = None) -> list[ModeSeries]:
    """One mode per cluster from the standardized residual rows of its members."""
    if clustering.labels.size != c_std.shape[0]:
        raise ValueError("clustering does not cover every stock")
    if scheme == "eigen" and G is None:
        G = sc.correlation(c_std)
    modes = []
    for k in range(1, clustering.K + 1):
        members = clustering.members(k)
        if scheme == "eigen":
            w = mode_weights(sc.cluster_submatrix(G, members), "eigen")
        else:
            w = sc.equal_weights(members.size)
        modes.append(ModeSeries("cluster", w.weights @ c_std[members], w, members, k))
    return modes


# -- per-stock cluster and interaction removal --------------------------------

@dataclass
class StockFit:
    """Joint elastic-net fit of one stock's standardized market residual.

    The fit runs on standardized mode columns; ``col_mean`` and ``col_scale``
    undo that, and ``c_scale`` maps back to the raw residual scale.
    """

    cluster: int
    fit: ElasticNetFit
    col_mean: np.ndarray
    col_scale: np.ndarray
    c_scale: float = 1.0

    @property
    def loadings(self) -> np.ndarray:
        """Loadings on the raw modes, in raw residual units."""
        return self.c_scale * self.fit.betas / self.col_scale

    @property
    def intercept(self) -> float:
        return self.c_scale * (self.fit.intercept - np.sum(self.fit.betas * self.col_mean / self.col_scale))

    @property
    def cluster_beta(self) -> float:
        return float(self.loadings[self.cluster - 1])

    @property
    def interaction_betas(self) -> np.ndarray:
        return np.delete(self.loadings, self.cluster - 1)

    def to_record(self, stock=None) -> dict:
        rec = self.fit.to_record(stock)
        rec.update(cluster=int(self.cluster), loadings=[float(b) for b in self.loadings],
                   raw_intercept=float(self.intercept))
        return rec


def loo_market_residuals(omega: np.ndarray, market: ModeSeries, i: int) -> np.ndarray:
    """Standardized market residuals of every stock against a market mode without stock ``i``.

    Residuals of an OLS on a weighted sum of the rows satisfy an exact linear
    identity, so the other stocks' residuals would otherwise carry stock
    ``i``'s own residual into its regressors.
    """
    w = market.weights
    if w.scheme == "equal":
        n = omega.shape[0]
        m = (n * market.values - omega[i]) / (n - 1)
    else:
        m = market.values - w.weights[i] * omega[i]
    m = m - m.mean()
    mm = m @ m
    oc = omega - omega.mean(axis=1, keepdims=True)
    beta = oc @ m / mm if mm > 0 else np.zeros(omega.shape[0])
    res = oc - beta[:, None] * m
    sd = res.std(axis=1)
    sd[sd == 0] = 1.0
    return res / sd[:, None]


def stock_design(modes: list[ModeSeries], rows: np.ndarray, i: int, own_k: int) -> np.ndarray:
    """T x K matrix of cluster modes built from ``rows``, with stock ``i`` left out of its own mode."""
    cols = []
    for m in modes:
        if m.cluster == own_k:
            cols.append(m.leave_one_out(rows, i) if m.members.size > 1
                        else np.zeros(rows.shape[1]))
        else:
            cols.append(m.weights.weights @ rows[m.members])
    return np.column_stack(cols)


def remove_cluster_and_interactions(c_i, X, own_k: int, c_scale: float = 1.0,
                                    a_grid=DEFAULT_A_GRID, lambda_grid=None, folds: int = 10,
                                    n_perm: int | None = 99, n_lambda: int = N_LAMBDA,
                                    lambda_ratio: float = LAMBDA_RATIO):
    """Elastic net of ``c_i`` on every cluster mode at once.

    ``c_i`` is the standardized residual and ``X`` the raw T x K mode matrix.
    Returns ``(cluster_removed, epsilon, StockFit)``, both series on the raw
    residual scale; ``cluster_removed`` strips only the intercept and the own
    cluster term, ``epsilon`` strips every mode. Constant columns (the
    leave-one-out mode of a singleton) are held at zero.
    """
    y = np.asarray(c_i, dtype=float)
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    live = scale > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - mean[live]) / scale[live]
    safe_scale = np.where(live, scale, 1.0)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(y, Z[:, live], n=n_lambda, ratio=lambda_ratio)
    fit = elastic_net_cv(y, Z[:, live], a_grid=a_grid, lambda_grid=lambda_grid, folds=folds)
    if n_perm:
        fit.p_values = predictor_significance(fit, y, Z[:, live], n_perm=n_perm)
    betas = np.zeros(X.shape[1])
    betas[live] = fit.betas
    pv = np.ones(X.shape[1])
    if fit.p_values is not None:
        pv[live] = fit.p_values
    full = ElasticNetFit(betas, fit.intercept, fit.a, fit.lam, fit.cv_error,
                         pv if fit.p_values is not None else None, fit.cv_table)
    fitted = full.intercept + Z @ betas
    own = full.intercept + Z[:, own_k - 1] * betas[own_k - 1]
    eps = c_scale * (y - fitted)
    cm = c_scale * (y - own)
    return cm, eps, StockFit(own_k, full, mean, safe_scale, float(c_scale))


# -- memory filtration --------------------------------------------------------

@dataclass
class GroupStats:
    name: str
    members: np.ndarray
    median: np.ndarray
    mad: np.ndarray
    significant: np.ndarray
    fractions: np.ndarray
    n_used: np.ndarray


@dataclass
class FiltrationReport:
    tickers: list[str]
    labels: np.ndarray
    eta: np.ndarray
    ratios: np.ndarray
    fractions: np.ndarray
    groups: dict
    diagnostics: dict
    l_cut: np.ndarray = field(default=None, repr=False)
    beta_vol: np.ndarray = field(default=None, repr=False)

    def group(self, k) -> GroupStats:
        return self.groups[k]

    def stock_records(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.tickers):
            rec = {"ticker": t, "cluster": int(self.labels[i])}
            rec.update({f"eta_{s}": float(self.eta[i, j]) for j, s in enumerate(STAGES)})
            rec.update({f"ratio_{s}": _num(self.ratios[i, j]) for j, s in enumerate(RATIOS)})
            rec.update({f"frac_{s}": _num(self.fractions[i, j]) for j, s in enumerate(FRACTIONS)})
            if t in self.diagnostics:
                rec["diagnostic"] = self.diagnostics[t]
            out.append(rec)
        return out


def _num(x):
    return None if not np.isfinite(x) else float(x)


def stock_ratios(eta_row) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stage ratios and contribution fractions for one stock.

    A ratio is undefined (NaN) when its denominator is not positive;
    numerators are floored at zero. Fractions need a positive plain-stage
    eta; negative contributions are clamped to zero and the rest renormalized.
    """
    e = np.asarray(eta_row, dtype=float)
    notes = []
    ratios = np.full(3, np.nan)
    for j in range(3):
        if e[j] > 0:
            ratios[j] = max(e[j + 1], 0.0) / e[j]
        else:
            notes.append(f"eta_{STAGES[j]}={e[j]:.4g} <= 0; ratio {RATIOS[j]} excluded")
    fr = np.full(4, np.nan)
    if e[0] > 0:
        raw = np.array([e[0] - e[1], e[1] - e[2], e[2] - e[3], e[3]]) / e[0]
        raw = np.clip(raw, 0.0, None)
        fr = raw / raw.sum()
    return ratios, fr, notes


def _group_stats(name, members, ratios, fractions) -> GroupStats:
    med = np.full(3, np.nan)
    mad = np.full(3, np.nan)
    n_used = np.zeros(3, dtype=int)
    for j in range(3):
        v = ratios[members, j]
        v = v[np.isfinite(v)]
        n_used[j] = v.size
        if v.size:
            med[j], mad[j] = sc.median_mad(v)
    enough = n_used >= MIN_DEFINED_SHARE * len(members)
    sig = enough & np.isfinite(med) & (med + mad < 1.0)
    fr = fractions[members]
    fr = fr[np.all(np.isfinite(fr), axis=1)]
    if fr.shape[0]:
        g = np.median(fr, axis=0)
        g = g / g.sum() if g.sum() > 0 else np.array([0.0, 0.0, 0.0, 1.0])
    else:
        g = np.full(4, np.nan)
    return GroupStats(name, np.asarray(members), med, mad, sig, g, n_used)


def memory_filtration(stages, labels=None, tickers=None, level: float = 0.05,
                      workers: int = 1) -> FiltrationReport:
    """Four-stage integrated-ACF report.

    ``stages`` is a sequence of four N x T arrays: plain ``omega``, market
    residual, own-cluster residual and full residual. Groups are ``"market"``
    (every stock) and each cluster id in ``labels``.
    """
    stages = [np.atleast_2d(np.asarray(s, dtype=float)) for s in stages]
    if len(stages) != 4:
        raise ValueError("need exactly four stages")
    N = stages[0].shape[0]
    labels = np.ones(N, dtype=int) if labels is None else np.asarray(labels, dtype=int)
    tickers = [str(i) for i in range(N)] if tickers is None else list(tickers)

    def profile(args):
        j, i = args
        row = stages[j][i]
        if row.std() <= 1e-12 * max(1.0, np.abs(row).max()):
            # a fully explained series carries no memory
            return 0.0, 1, np.nan
        p = memory_profile(row, level=level)
        return p.eta, p.l_cut, p.beta_vol

    jobs = [(j, i) for j in range(4) for i in range(N)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(profile, jobs))
    else:
        results = [profile(jb) for jb in jobs]
    eta = np.array([r[0] for r in results]).reshape(4, N).T
    l_cut = np.array([r[1] for r in results]).reshape(4, N).T
    beta = np.array([r[2] for r in results]).reshape(4, N).T

    ratios = np.full((N, 3), np.nan)
    fractions = np.full((N, 4), np.nan)
    diagnostics = {}
    for i in range(N):
        ratios[i], fractions[i], notes = stock_ratios(eta[i])
        if notes:
            diagnostics[tickers[i]] = "; ".join(notes)

    groups = {"market": _group_stats("market", np.arange(N), ratios, fractions)}
    for k in np.unique(labels):
        groups[int(k)] = _group_stats(int(k), np.flatnonzero(labels == k), ratios, fractions)
    return FiltrationReport(tickers, labels, eta, ratios, fractions, groups, diagnostics,
                            l_cut, beta)


def residual_fraction(report: FiltrationReport) -> np.ndarray:
    """Unexplained memory ``eta_IM / eta_PL`` per stock (floored at 0, NaN without baseline)."""
    base = report.eta[:, 0]
    out = np.full(base.size, np.nan)
    ok = base > 0
    out[ok] = np.clip(report.eta[ok, 3], 0.0, None) / base[ok]
    return out


def select_cluster_factors(report: FiltrationReport) -> list[int]:
    """Cluster ids whose cluster-stage ratio has median + MAD below one."""
    return [k for k, g in report.groups.items() if k != "market" and bool(g.significant[1])]


# -- sector enrichment --------------------------------------------------------

@dataclass
class EnrichmentResult:
    cluster: int
    size: int
    dominant_sector: str
    overlap: int
    p: float
    significant: bool

    def to_record(self) -> dict:
        return {"cluster": self.cluster, "size": self.size,
                "dominant_sector": self.dominant_sector, "overlap": self.overlap,
                "p": self.p, "significant": self.significant}


def default_bonferroni(n_clusters: int, n_sectors: int) -> float:
    return 0.5 * n_clusters * n_sectors


def sector_enrichment(clustering: Clustering, sectors, alpha: float = 0.05,
                      bonferroni_divisor: float | None = None) -> list[EnrichmentResult]:
    """Modal sector of every cluster and its hypergeometric over-representation p-value.

    Ties for the modal sector go to the alphabetically first name. The
    divisor defaults to ``0.5 * n_clusters * n_sectors``.
    """
    sectors = np.asarray([str(s) for s in sectors])
    labels = clustering.labels
    if sectors.size != labels.size:
        raise ValueError("every stock needs a sector label")
    names, counts = np.unique(sectors, return_counts=True)
    pop = dict(zip(names, counts))
    if bonferroni_divisor is None:
        bonferroni_divisor = default_bonferroni(clustering.K, names.size)
    if bonferroni_divisor <= 0:
        raise ValueError("bonferroni divisor must be positive")
    threshold = alpha / bonferroni_divisor
    out = []
    for k in range(1, clustering.K + 1):
        members = sectors[labels == k]
        s_names, s_counts = np.unique(members, return_counts=True)
        top = s_names[np.flatnonzero(s_counts == s_counts.max())[0]]
        x = int(s_counts.max())
        p = sc.hypergeometric_enrichment(labels.size, int(pop[top]), members.size, x)
        out.append(EnrichmentResult(k, int(members.size), str(top), x, float(p),
                                    bool(p < threshold)))
    return out


# -- orchestration ------------------------------------------------------------

@dataclass
class Decomposition:
    tickers: list[str]
    scheme: str
    market: ModeSeries
    removal: MarketRemoval
    clustering: Clustering
    modes: list[ModeSeries]
    fits: list[StockFit]
    cluster_removed: np.ndarray
    epsilon: np.ndarray
    G: sc.CorrelationMatrix = field(repr=False)

    def design(self, omega: np.ndarray, i: int) -> np.ndarray:
        """Regressors used for stock ``i`` (leave-one-out market and own-cluster modes)."""
        rows = loo_market_residuals(omega, self.market, i)
        return stock_design(self.modes, rows, i, self.fits[i].cluster)

    def reconstruct(self, omega: np.ndarray, i: int) -> np.ndarray:
        """Additive rebuild of ``omega_i`` from modes, loadings and ``epsilon_i``."""
        f = self.fits[i]
        ols = self.removal.fits[i]
        return (ols.beta * self.market.values + ols.alpha + f.intercept
                + self.design(omega, i) @ f.loadings + self.epsilon[i])

    def stages(self, omega: np.ndarray) -> list[np.ndarray]:
        return [omega, self.removal.residuals, self.cluster_removed, self.epsilon]


def decompose(panel: LogVolPanel, scheme: str = "eigen", clustering: Clustering | None = None,
              a_grid=DEFAULT_A_GRID, lambda_grid=None, folds: int = 10,
              n_perm: int | None = 99, workers: int = 1, n_lambda: int = N_LAMBDA,
              lambda_ratio: float = LAMBDA_RATIO) -> Decomposition:
    """Market removal, residual clustering (unless given) and the per-stock elastic nets."""
    E = sc.correlation(panel.omega, panel.tickers) if scheme == "eigen" else None
    mode = market_mode(panel, scheme, E)
    removal = remove_market(panel, mode)
    c_std = removal.standardized
    G = sc.correlation(c_std, panel.tickers)
    if clustering is None:
        clustering = cluster_correlation(G)
    modes = cluster_modes(c_std, clustering, scheme, G)

    def fit_one(i):
        k = int(clustering.labels[i])
        X = stock_design(modes, loo_market_residuals(panel.omega, mode, i), i, k)
        return remove_cluster_and_interactions(c_std[i], X, k, removal.scale[i], a_grid,
                                               lambda_grid, folds, n_perm, n_lambda,
                                               lambda_ratio)

    idx = range(len(panel.tickers))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(fit_one, idx))
    else:
        out = [fit_one(i) for i in idx]
    cm = np.vstack([o[0] for o in out])
    eps = np.vstack([o[1] for o in out])
    return Decomposition(list(panel.tickers), scheme, mode, removal, clustering, modes,
                         [o[2] for o in out], cm, eps, G)


def memory_scatter(panel: LogVolPanel, report: FiltrationReport,
                   E: sc.CorrelationMatrix | None = None) -> dict:
    """Per-stock plain-stage scatter data and one-sided Spearman tests.

    Covers eta against beta_vol (expected negative), eta against L_cut
    (positive), eta against the average cross-correlation rho_vol (positive)
    and beta_vol against rho_vol (negative).
    """
    if E is None:
        E = sc.correlation(panel.omega, panel.tickers)
    rho = sc.avg_cross_correlations(E)
    eta = report.eta[:, 0]
    beta = report.beta_vol[:, 0]
    lcut = report.l_cut[:, 0].astype(float)
    tests = {}
    for name, x, y, alt in (("eta_vs_beta", eta, beta, "less"),
                            ("eta_vs_lcut", eta, lcut, "greater"),
                            ("rho_vs_eta", rho, eta, "greater"),
                            ("rho_vs_beta", rho, beta, "less")):
        ok = np.isfinite(x) & np.isfinite(y)
        try:
            r, p = sc.spearman(x[ok], y[ok], alternative=alt)
        except ValueError:
            r, p = float("nan"), float("nan")
        tests[name] = {"rho": _num(r), "p": _num(p), "alternative": alt, "n": int(ok.sum())}
    rows = [{"ticker": t, "rho_vol": float(rho[i]), "eta": float(eta[i]),
             "beta_vol": _num(beta[i]), "l_cut": int(lcut[i])}
            for i, t in enumerate(panel.tickers)]
    return {"points": rows, "tests": tests}
