"""Minimum-cost injective assignment of truths to queries.

Shortest-augmenting-path solver (Jonker-Volgenant style) over a rectangular
g x q cost matrix, g <= q.  Determinism rule: among equal-cost optima the
returned assignment is lexicographically smallest in truth order, i.e.
truth 0 takes the lowest query index over all optima, then truth 1, and so
on.  The refinement that enforces this re-solves reduced problems, so it
costs nothing extra when the optimum is unique (the common case for float
costs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_REL_TOL = 1e-9


@dataclass
class MatchAssignment:
    """truth_to_query[t] is the query index assigned to truth t."""

    truth_to_query: np.ndarray
    total_cost: float

    def pairs(self) -> list:
        return [(t, int(q)) for t, q in enumerate(self.truth_to_query)]


def _solve_jv(cost: np.ndarray) -> np.ndarray:
    """Optimal assignment rows -> cols, cost (g, q) with g <= q."""
    g, q = cost.shape
    u = np.zeros(g + 1)
    v = np.zeros(q + 1)
    match = np.zeros(q + 1, dtype=np.intp)  # column -> row, 1-indexed, 0 = free
    way = np.zeros(q + 1, dtype=np.intp)
    for i in range(1, g + 1):
        match[0] = i
        j0 = 0
        minv = np.full(q + 1, np.inf)
        used = np.zeros(q + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, q + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(q + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = np.empty(g, dtype=np.intp)
    for j in range(1, q + 1):
        if match[j] != 0:
            out[match[j] - 1] = j - 1
    return out


def _optimal_total(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    assign = _solve_jv(cost)
    return float(cost[np.arange(cost.shape[0]), assign].sum())


def _lexicographic_refine(cost: np.ndarray, jv_assign: np.ndarray, best_total: float) -> np.ndarray:
    """Fix truths in order to the lowest query index that still completes
    to an optimal total."""
    g, q = cost.shape
    tol = TIE_REL_TOL * max(1.0, abs(best_total))
    chosen = np.full(g, -1, dtype=np.intp)
    free = np.ones(q, dtype=bool)
    base = 0.0
    on_jv_path = True
    for t in range(g):
        free_idx = np.flatnonzero(free)
        # Cheapest-completion lower bound per remaining truth, used to skip
        # hopeless candidates without a sub-solve.
        rest_rows = cost[t + 1 :][:, free_idx] if t + 1 < g else np.zeros((0, len(free_idx)))
        for j in free_idx:
            if on_jv_path and j == jv_assign[t]:
                chosen[t] = j
                break
            if rest_rows.shape[0]:
                keep = free_idx != j
                bound = base + cost[t, j] + rest_rows[:, keep].min(axis=1).sum()
                if bound > best_total + tol:
                    continue
                sub_total = _optimal_total(cost[t + 1 :][:, free_idx[keep]])
                total = base + cost[t, j] + sub_total
            else:
                total = base + cost[t, j]
            if total <= best_total + tol:
                chosen[t] = j
                break
        if chosen[t] < 0:
            # Float round-off collapsed every branch; fall back to the solver's pick.
            chosen[t] = jv_assign[t]
        if chosen[t] != jv_assign[t]:
            on_jv_path = False
        base += cost[t, chosen[t]]
        free[chosen[t]] = False
    return chosen


def hungarian_match(cost) -> MatchAssignment:
    """Minimum-total-cost injective map of truth rows to query columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {cost.shape}")
    g, q = cost.shape
    if g > q:
        raise ValueError(f"more truths than queries: {g} > {q}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if g == 0:
        return MatchAssignment(np.empty(0, dtype=np.intp), 0.0)
    jv = _solve_jv(cost)
    best_total = float(cost[np.arange(g), jv].sum())
    assign = _lexicographic_refine(cost, jv, best_total)
    total = float(cost[np.arange(g), assign].sum())
    return MatchAssignment(assign, total)
