"""Protocol embedding and clustering for one snapshot.

Six structural node features are standardised, embedded in 2-D with exact
t-SNE and clustered with DBSCAN. DBSCAN parameters come from a grid sweep that
maximises the silhouette score among settings yielding 5-20 clusters.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .netbuild import NetworkSnapshot

FEATURES = ("degree_centrality", "betweenness_centrality", "eigenvector_centrality",
            "pagerank", "local_clustering", "tvl")
EPS_GRID = tuple(round(0.1 * k, 1) for k in range(1, 51))
MIN_SAMPLES_GRID = tuple(range(3, 31))
TARGET_CLUSTERS = (5, 20)


@dataclass
class NodeFeatures:
    ids: list[str]
    raw: np.ndarray           # (n, 6) in FEATURES order
    standardized: np.ndarray  # (n, 6); tvl log1p-transformed before z-scoring

    def column(self, name: str) -> np.ndarray:
        return self.raw[:, FEATURES.index(name)]


def _adjacency(g: NetworkSnapshot):
    ids = sorted(g.node_ids())
    idx = {v: i for i, v in enumerate(ids)}
    out: list[set[int]] = [set() for _ in ids]
    und: list[set[int]] = [set() for _ in ids]
    for e in g.links:
        i, j = idx[e.source], idx[e.target]
        out[i].add(j)
        und[i].add(j)
        und[j].add(i)
    return ids, [sorted(s) for s in out], [sorted(s) for s in und]


def betweenness(out: list[list[int]]) -> np.ndarray:
    """Brandes betweenness on an unweighted directed graph, normalised by (n-1)(n-2)."""
    n = len(out)
    cb = np.zeros(n)
    for s in range(n):
        stack = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1.0
        dist = [-1] * n
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in out[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                cb[w] += delta[w]
    if n > 2:
        cb /= (n - 1) * (n - 2)
    return cb


def pagerank(out: list[list[int]], damping: float = 0.85, tol: float = 1e-8,
             max_iter: int = 10_000) -> np.ndarray:
    """Power iteration; dangling nodes spread their mass uniformly."""
    n = len(out)
    if n == 0:
        return np.zeros(0)
    rank = np.full(n, 1.0 / n)
    outdeg = np.array([len(o) for o in out], dtype=float)
    src = np.array([i for i, o in enumerate(out) for _ in o], dtype=int)
    dst = np.array([j for o in out for j in o], dtype=int)
    for _ in range(max_iter):
        new = np.zeros(n)
        if len(src):
            np.add.at(new, dst, rank[src] / outdeg[src])
        dangling = rank[outdeg == 0].sum()
        new = damping * (new + dangling / n) + (1.0 - damping) / n
        new /= new.sum()
        if np.abs(new - rank).sum() < tol:
            return new
        rank = new
    return rank


def eigenvector_centrality(und: list[list[int]], tol: float = 1e-12,
                           max_iter: int = 10_000) -> np.ndarray:
    """Leading eigenvector of the undirected adjacency on the largest component.

    Iterates with ``A + I`` so bipartite components converge; other
    components get zero. Unit L2 norm.
    """
    n = len(und)
    cent = np.zeros(n)
    if n == 0:
        return cent
    rows = [i for i, nb in enumerate(und) for _ in nb]
    cols = [j for nb in und for j in nb]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    sizes = np.bincount(labels)
    # ties between equally large components go to the one holding the smallest id
    best = min(range(len(sizes)), key=lambda c: (-sizes[c], int(np.argmax(labels == c))))
    members = np.flatnonzero(labels == best)
    if len(members) < 2:
        return cent
    sub = adj[members][:, members]
    x = np.full(len(members), 1.0 / math.sqrt(len(members)))
    for _ in range(max_iter):
        y = sub @ x + x
        y /= np.linalg.norm(y)
        if np.abs(y - x).sum() < tol:
            x = y
            break
        x = y
    cent[members] = x
    return cent


def _local_clustering(und: list[list[int]]) -> np.ndarray:
    sets = [set(nb) for nb in und]
    out = np.zeros(len(und))
    for i, nb in enumerate(sets):
        k = len(nb)
        if k >= 2:
            links = sum(len(sets[u] & nb) for u in nb) / 2
            out[i] = 2.0 * links / (k * (k - 1))
    return out


def standardize(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(float).copy()
    x[:, FEATURES.index("tvl")] = np.log1p(np.maximum(x[:, FEATURES.index("tvl")], 0.0))
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    z = np.zeros_like(x)
    ok = sd > 0
    z[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return z


def node_features(g: NetworkSnapshot) -> NodeFeatures:
    ids, out, und = _adjacency(g)
    n = len(ids)
    if n == 0:
        raise ValueError("snapshot has no nodes")
    deg = np.array([len(o) for o in out], dtype=float)
    for o in out:
        for j in o:
            deg[j] += 1
    sizes = {nd.id: float(nd.size) for nd in g.nodes}
    raw = np.column_stack([
        deg / (n - 1) if n > 1 else np.zeros(n),
        betweenness(out),
        eigenvector_centrality(und),
        pagerank(out),
        _local_clustering(und),
        np.array([sizes[i] for i in ids]),
    ])
    return NodeFeatures(ids, raw, standardize(raw))


# ---------------------------------------------------------------------------
# t-SNE


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_iter: int = 200) -> np.ndarray:
    """Row-stochastic P(j|i) with each row's entropy equal to ln(perplexity).

    The Gaussian precision of every row is found by bisection.
    """
    n = d2.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, math.inf
        for _ in range(max_iter):
            w = np.exp(-beta * d)
            s = w.sum()
            h = math.log(s) + beta * float((d * w).sum()) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        row = w / s
        p[i, :i] = row[:i]
        p[i, i + 1:] = row[i:]
    return p


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    cond = conditional_probabilities(_sq_distances(np.asarray(x, dtype=float)), perplexity)
    p = (cond + cond.T) / (2.0 * cond.shape[0])
    return np.maximum(p, 1e-300)


def _q_terms(y: np.ndarray):
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    _, q = _q_terms(y)
    mask = ~np.eye(len(p), dtype=bool)
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))).sum())


def kl_gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d KL / d y_i = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)."""
    num, q = _q_terms(y)
    w = (p - q) * num
    np.fill_diagonal(w, 0.0)
    return 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float


def tsne(features: np.ndarray, perplexity: float = 30.0, dims: int = 2, seed: int = 0,
         n_iter: int = 1000, learning_rate: float = 200.0, early_exaggeration: float = 12.0,
         exaggeration_iters: int = 250, momentum: tuple[float, float] = (0.5, 0.8),
         momentum_switch: int = 250) -> TsneResult:
    """Exact t-SNE with the classic momentum/gain schedule."""
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    if perplexity <= 0 or n <= 3 * perplexity:
        raise ValueError(f"need more than 3 * perplexity points (n={n}, perplexity={perplexity})")
    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, dims))
    kl0 = kl_divergence(p, y)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        if it == exaggeration_iters:
            # velocity built under exaggerated attraction would fling points apart
            update = np.zeros_like(y)
            gains = np.ones_like(y)
        exag = early_exaggeration if it < exaggeration_iters else 1.0
        mom = momentum[0] if it < momentum_switch else momentum[1]
        grad = kl_gradient(p * exag, y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return TsneResult(y, kl0, kl_divergence(p, y))


# ---------------------------------------------------------------------------
# DBSCAN + silhouette


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return np.sqrt(_sq_distances(pts))


def _dbscan_from_dist(dist: np.ndarray, neighbors: np.ndarray, counts: np.ndarray,
                      min_samples: int) -> np.ndarray:
    n = len(dist)
    core = counts >= min_samples
    labels = np.full(n, -1, dtype=int)
    if not core.any():
        return labels
    core_idx = np.flatnonzero(core)
    sub = csr_matrix(neighbors[np.ix_(core_idx, core_idx)])
    _, comp = connected_components(sub, directed=False)
    labels[core_idx] = comp
    border = np.flatnonzero(~core & neighbors[:, core].any(axis=1))
    for i in border:
        cands = core_idx[neighbors[i, core_idx]]
        labels[i] = labels[cands[np.argmin(dist[i, cands])]]
    # canonical numbering: clusters ordered by their smallest member index
    order = {}
    for i in range(n):
        if labels[i] >= 0 and labels[i] not in order:
            order[labels[i]] = len(order)
    return np.array([order[l] if l >= 0 else -1 for l in labels], dtype=int)


def dbscan(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Euclidean DBSCAN; a point's neighbourhood includes itself.

    Border points join the cluster of their nearest core point, so labels do
    not depend on visiting order. Noise is -1.
    """
    if eps <= 0 or min_samples < 1:
        raise ValueError("need eps > 0 and min_samples >= 1")
    dist = pairwise_distances(points)
    neighbors = dist <= eps
    return _dbscan_from_dist(dist, neighbors, neighbors.sum(axis=1), min_samples)


def silhouette(dist: np.ndarray, labels: np.ndarray) -> float | None:
    """Mean silhouette over non-noise points; None with fewer than 2 clusters."""
    keep = labels >= 0
    lab = labels[keep]
    clusters = np.unique(lab)
    if len(clusters) < 2:
        return None
    d = dist[np.ix_(keep, keep)]
    onehot = (lab[:, None] == clusters[None, :]).astype(float)
    sums = d @ onehot
    sizes = onehot.sum(axis=0)
    own = np.searchsorted(clusters, lab)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(len(lab)), own] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(lab)), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


@dataclass
class ClusteringResult:
    labels: np.ndarray
    eps: float
    min_samples: int
    silhouette: float | None
    n_clusters: int
    target_missed: bool = False
    embedding: np.ndarray | None = None
    grid: list[tuple[float, int, int, float | None]] = field(default_factory=list)


def sweep(points: np.ndarray, eps_grid=EPS_GRID, min_samples_grid=MIN_SAMPLES_GRID,
          target: tuple[int, int] = TARGET_CLUSTERS) -> ClusteringResult:
    """Grid search for the DBSCAN setting with the best silhouette.

    Only settings with a cluster count inside ``target`` compete; if none
    does, the best silhouette overall is returned with ``target_missed``.
    Ties keep the earlier grid cell (smaller eps, then smaller min_samples).
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    dist = pairwise_distances(pts)
    grid = []
    best_in: tuple[float, ClusteringResult] | None = None
    best_any: tuple[float, ClusteringResult] | None = None
    first: ClusteringResult | None = None
    for eps in eps_grid:
        neighbors = dist <= eps
        counts = neighbors.sum(axis=1)
        for ms in min_samples_grid:
            labels = _dbscan_from_dist(dist, neighbors, counts, ms)
            k = int(labels.max()) + 1
            sil = silhouette(dist, labels)
            grid.append((float(eps), int(ms), k, sil))
            res = ClusteringResult(labels, float(eps), int(ms), sil, k)
            if first is None:
                first = res
            if sil is None:
                continue
            if best_any is None or sil > best_any[0]:
                best_any = (sil, res)
            if target[0] <= k <= target[1] and (best_in is None or sil > best_in[0]):
                best_in = (sil, res)
    if best_in is not None:
        out = best_in[1]
    else:
        out = best_any[1] if best_any is not None else first
        out.target_missed = True  # type: ignore[union-attr]
    out.grid = grid  # type: ignore[union-attr]
    return out  # type: ignore[return-value]


def cluster_snapshot(g: NetworkSnapshot, perplexity: float = 30.0, seed: int = 0,
                     n_iter: int = 1000) -> tuple[NodeFeatures, ClusteringResult]:
    feats = node_features(g)
    emb = tsne(feats.standardized, perplexity=perplexity, seed=seed, n_iter=n_iter)
    result = sweep(emb.embedding)
    result.embedding = emb.embedding
    return feats, result
