"""Exact discrete optimal transport via the transportation simplex.

Northwest-corner start, dual potentials for reduced costs, Bland's rule for
entering and leaving cells. Intended for the tiny supports that appear in
neighbourhood-measure comparisons, not for large problems.
"""
from __future__ import annotations

from collections import deque

import numpy as np

TOL = 1e-12


def _northwest_corner(supply: np.ndarray, demand: np.ndarray):
    s, d = supply.copy(), demand.copy()
    m, n = len(s), len(d)
    flow = np.zeros((m, n))
    basis: list[tuple[int, int]] = []
    i = j = 0
    while True:
        x = min(s[i], d[j])
        flow[i, j] = x
        basis.append((i, j))
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1 or (i < m - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(cost: np.ndarray, basis: list[tuple[int, int]]):
    m, n = cost.shape
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    rows: dict[int, list[int]] = {}
    cols: dict[int, list[int]] = {}
    for i, j in basis:
        rows.setdefault(i, []).append(j)
        cols.setdefault(j, []).append(i)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in rows.get(k, ()):
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in cols.get(k, ()):
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _tree_path(basis: list[tuple[int, int]], i0: int, j0: int) -> list[tuple[int, int]]:
    """Basic cells on the tree path from row ``i0`` to column ``j0``."""
    adj: dict[tuple[str, int], list[tuple[tuple[str, int], tuple[int, int]]]] = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append((("c", j), (i, j)))
        adj.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("r", i0), ("c", j0)
    parent: dict[tuple[str, int], tuple[tuple[str, int], tuple[int, int]] | None] = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, cell in adj.get(node, ()):
            if nxt not in parent:
                parent[nxt] = (node, cell)
                queue.append(nxt)
    path = []
    node = goal
    while parent[node] is not None:
        prev, cell = parent[node]  # type: ignore[misc]
        path.append(cell)
        node = prev
    path.reverse()
    return path


def transport(supply, demand, cost, max_iter: int = 10_000) -> tuple[float, np.ndarray]:
    """Minimum-cost plan moving ``supply`` onto ``demand``.

    Returns ``(total_cost, plan)``. Masses must be non-negative with equal
    totals.
    """
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (len(supply), len(demand)):
        raise ValueError("cost matrix shape does not match the marginals")
    if (supply < 0).any() or (demand < 0).any():
        raise ValueError("masses must be non-negative")
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(1.0, supply.sum()):
        raise ValueError("unbalanced problem")
    if len(supply) == 0 or len(demand) == 0:
        return 0.0, np.zeros(cost.shape)

    flow, basis = _northwest_corner(supply, demand)
    basic = set(basis)
    m, n = cost.shape
    for _ in range(max_iter):
        u, v = _potentials(cost, basis)
        entering = None
        for i in range(m):
            for j in range(n):
                if (i, j) not in basic and cost[i, j] - u[i] - v[j] < -TOL:
                    entering = (i, j)
                    break
            if entering is not None:
                break
        if entering is None:
            flow[flow < 0] = 0.0
            return float((flow * cost).sum()), flow
        path = _tree_path(basis, *entering)
        # cycle: entering (+), then path cells from the column end backwards, alternating - / +
        minus = path[::-1][0::2]
        plus = path[::-1][1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] <= theta + TOL)
        flow[entering] += theta
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basic.discard(leaving)
        basis.append(entering)
        basic.add(entering)
    raise RuntimeError("transportation simplex did not converge")


def wasserstein1(mu: dict, nu: dict, dist) -> float:
    """W1 between two finitely supported measures given a distance callback."""
    src = sorted(mu)
    dst = sorted(nu)
    cost = np.array([[dist(a, b) for b in dst] for a in src], dtype=float)
    value, _ = transport([mu[a] for a in src], [nu[b] for b in dst], cost)
    return value
