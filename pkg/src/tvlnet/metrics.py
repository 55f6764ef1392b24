"""Global metrics for one exposure snapshot.

Degrees are total degrees (in + out) of the directed simple graph. Closeness
follows directed shortest paths. Clustering and Ollivier-Ricci curvature work
on the undirected projection.
"""
from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import asdict, dataclass, fields

import numpy as np

from .netbuild import NetworkSnapshot
from .transport import wasserstein1


@dataclass
class MetricsReport:
    date: str
    n_nodes: int
    n_edges: int
    degree_centralization: float | None
    degree_cv: float | None
    degree_entropy: float
    top_decile_concentration: float | None
    assortativity: float | None
    avg_closeness: float | None
    density: float | None
    clustering_coefficient: float | None
    network_entropy: float
    ollivier_ricci_mean: float | None
    ricci_skipped: int = 0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)


class _Graph:
    """Index-based view of a snapshot's directed edge set."""

    def __init__(self, nodes: list[str], edges: list[tuple[str, str]]):
        self.nodes = nodes
        self.index = {v: i for i, v in enumerate(nodes)}
        self.n = len(nodes)
        self.out: list[list[int]] = [[] for _ in nodes]
        self.und: list[set[int]] = [set() for _ in nodes]
        self.edges = []
        for s, t in edges:
            i, j = self.index[s], self.index[t]
            self.out[i].append(j)
            self.und[i].add(j)
            self.und[j].add(i)
            self.edges.append((i, j))
        deg = [0] * self.n
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        self.degree = deg

    @classmethod
    def from_snapshot(cls, g: NetworkSnapshot) -> "_Graph":
        nodes = sorted(g.node_ids())
        edges = sorted({(e.source, e.target) for e in g.links})
        return cls(nodes, edges)


def degree_centralization(degrees: list[int]) -> float | None:
    n = len(degrees)
    if n < 3:
        return None
    dmax = max(degrees)
    return sum(dmax - d for d in degrees) / ((n - 1) * (n - 2))


def degree_cv(degrees: list[int]) -> float | None:
    if not degrees:
        return None
    arr = np.asarray(degrees, dtype=float)
    mu = arr.mean()
    if mu == 0:
        return None
    return float(arr.std() / mu)


def degree_entropy(degrees: list[int]) -> float:
    n = len(degrees)
    h = 0.0
    for c in Counter(degrees).values():
        p = c / n
        h -= p * math.log(p)
    return h


def top_decile_concentration(degrees: list[int]) -> float | None:
    total = sum(degrees)
    if total == 0:
        return None
    k = math.ceil(0.1 * len(degrees))
    return sum(sorted(degrees, reverse=True)[:k]) / total


def assortativity(degrees: list[int], edges: list[tuple[int, int]]) -> float | None:
    """Pearson correlation of endpoint degrees, each edge counted both ways."""
    if len(degrees) < 3 or not edges:
        return None
    a = np.array([degrees[i] for i, j in edges] + [degrees[j] for i, j in edges], dtype=float)
    b = np.array([degrees[j] for i, j in edges] + [degrees[i] for i, j in edges], dtype=float)
    a -= a.mean()
    b -= b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0:
        return None
    return float(a @ b) / denom


def _bfs(adj, src: int) -> dict[int, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def closeness(graph: _Graph) -> list[float]:
    """Directed closeness with the Wasserman-Faust correction.

    ``C(i) = (r / (n - 1)) * (r / sum_j d(i, j))`` over the ``r`` nodes
    reachable from ``i``; equals ``(n - 1) / sum_j d(i, j)`` when all are.
    """
    n = graph.n
    out = []
    for i in range(n):
        dist = _bfs(graph.out, i)
        r = len(dist) - 1
        total = sum(dist.values())
        out.append(0.0 if r == 0 or n < 2 else (r / (n - 1)) * (r / total))
    return out


def local_clustering(graph: _Graph) -> list[float]:
    out = []
    for i in range(graph.n):
        nb = graph.und[i]
        k = len(nb)
        if k < 2:
            out.append(0.0)
            continue
        links = sum(1 for u in nb for v in graph.und[u] if v in nb) / 2
        out.append(2.0 * links / (k * (k - 1)))
    return out


def network_entropy(g: NetworkSnapshot) -> float:
    """Shannon entropy (nats) of the normalised link-size distribution."""
    sizes = [float(e.size) for e in g.links if e.size > 0]
    total = sum(sizes)
    if total == 0:
        return 0.0
    return float(-sum((s / total) * math.log(s / total) for s in sizes))


def ollivier_ricci(g: NetworkSnapshot, alpha: float = 0.0) -> tuple[dict[tuple[str, str], float], int]:
    """Curvature ``1 - W1(mu_u, mu_v)`` of every undirected edge.

    ``mu_u`` keeps mass ``alpha`` at ``u`` and spreads ``1 - alpha`` uniformly
    over its neighbours; costs are hop distances. Returns the per-edge map
    (keys ordered ``(min, max)``) and the number of skipped edges.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    graph = _Graph.from_snapshot(g)
    return _ricci(graph, alpha)


def _ricci(graph: _Graph, alpha: float) -> tuple[dict[tuple[str, str], float], int]:
    und = [sorted(s) for s in graph.und]
    cache: dict[int, dict[int, int]] = {}

    def dist(a: int, b: int) -> float:
        if a not in cache:
            cache[a] = _bfs(und, a)
        return float(cache[a].get(b, math.inf))

    def measure(u: int) -> dict[int, float]:
        mu = {v: (1.0 - alpha) / len(und[u]) for v in und[u]}
        if alpha > 0:
            mu[u] = mu.get(u, 0.0) + alpha
        return mu

    pairs = sorted({(min(i, j), max(i, j)) for i, j in graph.edges if i != j})
    out: dict[tuple[str, str], float] = {}
    skipped = 0
    for u, v in pairs:
        if not und[u] or not und[v]:
            skipped += 1
            continue
        w1 = wasserstein1(measure(u), measure(v), dist)
        out[(graph.nodes[u], graph.nodes[v])] = 1.0 - w1
    return out, skipped


def compute_metrics(g: NetworkSnapshot, alpha: float = 0.0, ricci: bool = True) -> MetricsReport:
    graph = _Graph.from_snapshot(g)
    n, m = graph.n, len(graph.edges)
    deg = graph.degree
    close = closeness(graph)
    if ricci and m:
        curv, skipped = _ricci(graph, alpha)
        ricci_mean = float(np.mean(list(curv.values()))) if curv else None
    else:
        skipped, ricci_mean = 0, None
    return MetricsReport(
        date=g.date,
        n_nodes=n,
        n_edges=m,
        degree_centralization=degree_centralization(deg),
        degree_cv=degree_cv(deg),
        degree_entropy=degree_entropy(deg) if n else 0.0,
        top_decile_concentration=top_decile_concentration(deg),
        assortativity=assortativity(deg, graph.edges),
        avg_closeness=float(np.mean(close)) if n else None,
        density=m / (n * (n - 1)) if n > 1 else None,
        clustering_coefficient=float(np.mean(local_clustering(graph))) if n else None,
        network_entropy=network_entropy(g),
        ollivier_ricci_mean=ricci_mean,
        ricci_skipped=skipped,
    )


def composition_length(g: NetworkSnapshot, k: int = 30) -> list[tuple[str, str, int]]:
    """The ``k`` links with the most distinct tokens, ties by (source, target)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    rows = [(e.source, e.target, len(e.composition)) for e in g.links]
    rows.sort(key=lambda r: (-r[2], r[0], r[1]))
    return rows[:k]
