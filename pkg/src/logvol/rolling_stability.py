"""Persistence of clusters and of their memory reduction across rolling windows.

Each window re-runs the whole decomposition on its own slice of the panel:
market mode, residual correlation, DBHT clustering, cluster modes and the
filtration. A static cluster counts as matched in a window when some window
cluster over-represents its members (hypergeometric test, Bonferroni over
all static x window cluster pairs).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import stats_core as sc
from .dbht import Clustering
from .factor_pipeline import LogVolPanel, decompose, memory_filtration
from .memory_metrics import MIN_LENGTH

# lighter elastic-net search used inside every window
WINDOW_A_GRID = (0.0, 0.5, 1.0)
WINDOW_N_LAMBDA = 20
WINDOW_FOLDS = 5


@dataclass
class WindowPlan:
    n_windows: int
    length: int
    shift: int
    ranges: list[tuple[int, int]]


@dataclass
class PersistenceRecord:
    cluster: int
    windows_matched: int = 0
    windows_memory_significant: int = 0

    def to_record(self) -> dict:
        return {"cluster_id": self.cluster, "windows_matched": self.windows_matched,
                "windows_memory_significant": self.windows_memory_significant}


@dataclass
class WindowResult:
    start: int
    end: int
    clustering: Clustering
    # static cluster -> (window cluster, p) for matched clusters
    matches: dict
    memory_significant: dict


def make_windows(T: int, W: int, n: int) -> WindowPlan:
    """``n`` windows of length ``W`` with shift ``floor((T - W) / (n - 1))``."""
    if n < 2:
        raise ValueError("need at least 2 windows")
    if W < 1 or W > T:
        raise ValueError(f"window length {W} must lie in [1, {T}]")
    if T - W < n - 1:
        raise ValueError(f"no room for {n} distinct windows of length {W} in {T} days")
    shift = (T - W) // (n - 1)
    ranges = [(m * shift, m * shift + W) for m in range(n)]
    return WindowPlan(n, W, shift, ranges)


def match_clusters(static: Clustering, window: Clustering, alpha: float = 0.05,
                   divisor: float | None = None) -> dict:
    """Best over-represented window cluster for each static cluster, if significant.

    The Bonferroni divisor defaults to the number of (static, window) pairs.
    """
    N = static.labels.size
    if divisor is None:
        divisor = static.K * window.K
    threshold = alpha / divisor
    out = {}
    w_sizes = window.sizes()
    for k in range(1, static.K + 1):
        members = static.labels == k
        best = None
        for j in range(1, window.K + 1):
            x = int(np.sum(members & (window.labels == j)))
            if x == 0:
                continue
            p = sc.hypergeometric_enrichment(N, int(members.sum()), int(w_sizes[j - 1]), x)
            if best is None or p < best[1]:
                best = (j, p)
        if best is not None and best[1] < threshold:
            out[k] = best
    return out


def run_window(panel: LogVolPanel, start: int, end: int, static: Clustering,
               scheme: str = "eigen", alpha: float = 0.05, level: float = 0.05,
               a_grid=WINDOW_A_GRID, folds: int = WINDOW_FOLDS) -> WindowResult:
    """Decompose one window, cluster it and score every static cluster."""
    if end - start < MIN_LENGTH:
        raise ValueError(f"window of {end - start} days is shorter than {MIN_LENGTH}")
    sub = panel.window(start, end)
    dec = decompose(sub, scheme, None, a_grid=a_grid, lambda_grid=None, folds=folds,
                    n_perm=None, n_lambda=WINDOW_N_LAMBDA)
    rep = memory_filtration(dec.stages(sub.omega), dec.clustering.labels, sub.tickers, level)
    matches = match_clusters(static, dec.clustering, alpha)
    sig = {}
    static_rep = None
    for k in range(1, static.K + 1):
        if k in matches:
            sig[k] = bool(rep.groups[matches[k][0]].significant[1])
        else:
            # unmatched: judge the static membership on this window's data
            if static_rep is None:
                sdec = decompose(sub, scheme, static, a_grid=a_grid, lambda_grid=None,
                                 folds=folds, n_perm=None, n_lambda=WINDOW_N_LAMBDA)
                static_rep = memory_filtration(sdec.stages(sub.omega), static.labels,
                                               sub.tickers, level)
            sig[k] = bool(static_rep.groups[k].significant[1])
    return WindowResult(start, end, dec.clustering, matches, sig)


def rolling_pipeline(panel: LogVolPanel, plan: WindowPlan, static: Clustering,
                     scheme: str = "eigen", alpha: float = 0.05, level: float = 0.05,
                     workers: int = 1) -> tuple[list[PersistenceRecord], list[WindowResult]]:
    """Per-cluster counts of matched and memory-significant windows."""
    def job(rng):
        return run_window(panel, rng[0], rng[1], static, scheme, alpha, level)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(job, plan.ranges))
    else:
        results = [job(r) for r in plan.ranges]
    records = [PersistenceRecord(k) for k in range(1, static.K + 1)]
    for res in results:
        for rec in records:
            rec.windows_matched += int(rec.cluster in res.matches)
            rec.windows_memory_significant += int(res.memory_significant[rec.cluster])
    return records, results
