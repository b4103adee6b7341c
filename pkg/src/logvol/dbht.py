"""Directed Bubble Hierarchical Tree clustering on a triangulated planar graph.

The planar substrate is grown greedily: start from the best 4-clique and keep
inserting the (vertex, triangular face) pair with the largest similarity gain.
Every insertion creates a new 4-clique ("bubble") attached to the bubble that
owned the split face, so the bubble tree comes for free. Each tree edge is a
separating triangle; it is directed toward the side of the graph the triangle
is more strongly tied to. Bubbles with no outgoing edge are cluster centres
and every vertex joins the centre it is most attached to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .stats_core import CorrelationMatrix

SEED_CANDIDATES = 16


@dataclass
class FilteredGraph:
    n: int
    edges: list[tuple[int, int, float]]
    triangulation: list[tuple[int, int, int]]
    bubbles: list[tuple[int, int, int, int]] = field(default_factory=list)
    # (parent bubble, child bubble, separating triangle)
    bubble_edges: list[tuple[int, int, tuple[int, int, int]]] = field(default_factory=list)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n), dtype=bool)
        for i, j, _ in self.edges:
            A[i, j] = A[j, i] = True
        return A

    def degrees(self) -> np.ndarray:
        return self.adjacency().sum(axis=1)


@dataclass
class Clustering:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        ids = np.unique(self.labels)
        if ids.size and (ids[0] != 1 or ids[-1] != ids.size):
            raise ValueError("cluster ids must be 1..K with no empty cluster")

    @property
    def K(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K + 1)[1:]


def canonical_labels(labels) -> np.ndarray:
    """Renumber clusters 1..K in order of their lowest member index."""
    labels = np.asarray(labels)
    out = np.zeros(labels.size, dtype=int)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping) + 1
        out[i] = mapping[lab]
    return out


def similarity_from_residual(G: CorrelationMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity (the correlations themselves) and distance ``sqrt(2 (1 - G))``."""
    vals = G.values if isinstance(G, CorrelationMatrix) else np.asarray(G, dtype=float)
    S = vals.copy()
    D = np.sqrt(np.clip(2.0 * (1.0 - S), 0.0, None))
    np.fill_diagonal(D, 0.0)
    return S, D


def _seed_clique(S: np.ndarray) -> tuple[int, int, int, int]:
    n = S.shape[0]
    off = S.copy()
    np.fill_diagonal(off, 0.0)
    strength = off.sum(axis=1)
    # stable sort: equal strengths keep index order
    cand = np.sort(np.argsort(-strength, kind="stable")[:min(n, SEED_CANDIDATES)])
    best, best_val = None, -np.inf
    for q in combinations(cand.tolist(), 4):
        val = off[np.ix_(q, q)].sum()
        if val > best_val:
            best, best_val = q, val
    return tuple(best)


def build_planar_graph(S) -> FilteredGraph:
    """Maximal planar graph (3n - 6 edges) keeping high-similarity edges.

    Ties in the greedy step go to the lowest vertex index, then the lowest
    face index.
    """
    S = np.asarray(S.values if isinstance(S, CorrelationMatrix) else S, dtype=float)
    n = S.shape[0]
    if n < 5:
        raise ValueError("need at least 5 vertices")
    seed = _seed_clique(S)
    edges = {tuple(sorted(e)) for e in combinations(seed, 2)}
    faces = [tuple(sorted(f)) for f in combinations(seed, 3)]
    alive = [True] * 4
    owner = [0] * 4
    bubbles = [tuple(sorted(seed))]
    bubble_edges = []
    remaining = np.ones(n, dtype=bool)
    remaining[list(seed)] = False

    best_val: list[float] = []
    best_v: list[int] = []

    def face_best(f):
        g = S[:, f[0]] + S[:, f[1]] + S[:, f[2]]
        g = np.where(remaining, g, -np.inf)
        v = int(np.argmax(g))
        return float(g[v]), v

    for f in faces:
        val, v = face_best(f)
        best_val.append(val)
        best_v.append(v)

    for _ in range(n - 4):
        vals = np.where(alive, best_val, -np.inf)
        top = vals.max()
        tied = np.flatnonzero(vals == top)
        fi = int(min(tied, key=lambda i: (best_v[i], i)))
        v = best_v[fi]
        a, b, c = faces[fi]
        remaining[v] = False
        alive[fi] = False
        edges.update({tuple(sorted((v, a))), tuple(sorted((v, b))), tuple(sorted((v, c)))})
        new_bubble = len(bubbles)
        bubbles.append(tuple(sorted((v, a, b, c))))
        bubble_edges.append((owner[fi], new_bubble, (a, b, c)))
        for nf in ((a, b, v), (a, c, v), (b, c, v)):
            faces.append(tuple(sorted(nf)))
            alive.append(True)
            owner.append(new_bubble)
            best_val.append(-np.inf)
            best_v.append(-1)
        if not remaining.any():
            break
        for i in range(len(faces)):
            if alive[i] and (best_v[i] == v or best_v[i] == -1):
                best_val[i], best_v[i] = face_best(faces[i])

    tri = [faces[i] for i in range(len(faces)) if alive[i]]
    edge_list = [(i, j, float(S[i, j])) for i, j in sorted(edges)]
    return FilteredGraph(n, edge_list, tri, bubbles, bubble_edges)


def _subtree_bubbles(n_bubbles, bubble_edges):
    children = [[] for _ in range(n_bubbles)]
    for p, c, _ in bubble_edges:
        children[p].append(c)
    sub = [None] * n_bubbles
    # bubbles are created in order, so children always have larger indices
    for b in range(n_bubbles - 1, -1, -1):
        s = {b}
        for c in children[b]:
            s |= sub[c]
        sub[b] = s
    return sub


def excess_similarity(S) -> np.ndarray:
    """Similarity above the mean off-diagonal level, floored at zero."""
    S = np.asarray(S, dtype=float)
    off = ~np.eye(S.shape[0], dtype=bool)
    return np.clip(S - S[off].mean(), 0.0, None)


def direct_bubble_tree(graph: FilteredGraph, S, rule: str = "excess") -> list[tuple[int, int]]:
    """Orient each bubble-tree edge as ``(from, to)``.

    Removing a tree edge splits the vertices (minus the separating triangle)
    into two sides; the edge points to the side the triangle pulls harder on.
    With ``rule="excess"`` the pull is the triangle's summed excess
    similarity to every vertex on that side. ``rule="planar"`` sums only the
    planar edges between the triangle and the side.
    """
    S = np.asarray(S.values if isinstance(S, CorrelationMatrix) else S, dtype=float)
    if rule == "excess":
        W = excess_similarity(S)
    elif rule == "planar":
        W = np.where(graph.adjacency(), S, 0.0)
    else:
        raise ValueError(f"unknown direction rule {rule!r}")
    sub = _subtree_bubbles(len(graph.bubbles), graph.bubble_edges)
    everything = set(range(graph.n))
    directed = []
    for parent, child, tri in graph.bubble_edges:
        inside = set()
        for b in sub[child]:
            inside.update(graph.bubbles[b])
        inside -= set(tri)
        outside = everything - inside - set(tri)
        t = list(tri)
        w_in = W[np.ix_(t, sorted(inside))].sum() if inside else 0.0
        w_out = W[np.ix_(t, sorted(outside))].sum() if outside else 0.0
        if w_in > w_out:
            directed.append((parent, child))
        elif w_out > w_in:
            directed.append((child, parent))
        else:
            lo_in = min(inside) if inside else graph.n
            lo_out = min(outside) if outside else graph.n
            directed.append((parent, child) if lo_in < lo_out else (child, parent))
    return directed


def dbht_cluster(graph: FilteredGraph, distance, similarity=None,
                 rule: str = "excess") -> Clustering:
    """Discrete DBHT clustering of the planar graph.

    ``similarity`` defaults to ``1 - distance**2 / 2`` (the inverse of the
    correlation distance). A constant similarity gives a single cluster.
    """
    D = np.asarray(distance, dtype=float)
    n = graph.n
    if D.shape != (n, n):
        raise ValueError("distance matrix does not match the graph")
    S = 1.0 - D ** 2 / 2.0 if similarity is None else np.asarray(similarity, dtype=float)
    off = S[~np.eye(n, dtype=bool)]
    if np.all(off == off[0]):
        return Clustering(np.ones(n, dtype=int))

    directed = direct_bubble_tree(graph, S, rule)
    nb = len(graph.bubbles)
    out_edges = [[] for _ in range(nb)]
    for f, t in directed:
        out_edges[f].append(t)
    converging = [b for b in range(nb) if not out_edges[b]]

    reach = [None] * nb
    for b in range(nb):
        seen, stack, hits = {b}, [b], set()
        while stack:
            x = stack.pop()
            if not out_edges[x]:
                hits.add(x)
            for y in out_edges[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        reach[b] = hits

    vertex_bubbles = [[] for _ in range(n)]
    for b, members in enumerate(graph.bubbles):
        for v in members:
            vertex_bubbles[v].append(b)

    A = graph.adjacency()
    W = np.where(A, S, 0.0)
    conv_set = set(converging)
    assign = np.empty(n, dtype=int)
    for v in range(n):
        own = [b for b in vertex_bubbles[v] if b in conv_set]
        if own:
            cands = sorted(own)
        else:
            cands = sorted(set().union(*(reach[b] for b in vertex_bubbles[v])))
        if len(cands) == 1:
            assign[v] = cands[0]
            continue
        scores = []
        for c in cands:
            others = [u for u in graph.bubbles[c] if u != v]
            scores.append((-W[v, others].sum(), D[v, others].mean(), c))
        assign[v] = min(scores)[2]
    return Clustering(canonical_labels(assign))


def cluster_correlation(G: CorrelationMatrix | np.ndarray) -> Clustering:
    """Similarity, planar graph and DBHT in one call."""
    S, D = similarity_from_residual(G)
    graph = build_planar_graph(S)
    return dbht_cluster(graph, D, S)


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return (x * (x - 1) / 2.0).sum()

    index = pairs(table)
    ra, rb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = a.size * (a.size - 1) / 2.0
    expected = ra * rb / total
    maximum = 0.5 * (ra + rb)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def save_clustering(clustering: Clustering, tickers, path) -> None:
    with open(path, "w") as fh:
        fh.write("ticker,cluster_id\n")
        for t, k in zip(tickers, clustering.labels):
            fh.write(f"{t},{int(k)}\n")


def load_clustering(path) -> tuple[list[str], Clustering]:
    tickers, labels = [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            t, k = line.strip().split(",")
            tickers.append(t)
            labels.append(int(k))
    return tickers, Clustering(np.array(labels))


def save_edges(graph: FilteredGraph, tickers, path) -> None:
    with open(path, "w") as fh:
        fh.write("source,target,weight\n")
        for i, j, w in graph.edges:
            fh.write(f"{tickers[i]},{tickers[j]},{w!r}\n")
