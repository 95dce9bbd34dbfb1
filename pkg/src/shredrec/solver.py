"""Ordering search: minimize the summed cost of consecutive shreds.

The objective is an open path (no wrap-around edge) with free endpoints.
``solve_exact`` runs the subset dynamic program; ``solve_heuristic``
builds nearest-neighbor paths and improves them by moving segments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._validation import check_permutation, check_square_matrix

EXACT_LIMIT = 20


@dataclass
class Solution:
    order: list
    objective: float
    solver: str = ""
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {"order": [int(i) for i in self.order], "objective": self.objective,
                "solver": self.solver, "wall_time": self.wall_time}


def _values(matrix) -> np.ndarray:
    return check_square_matrix(getattr(matrix, "values", matrix))


def objective(matrix, order) -> float:
    """Sum of ``c(order[k], order[k+1])`` accumulated left to right."""
    C = _values(matrix)
    order = check_permutation(order, C.shape[0])
    total = 0.0
    for a, b in zip(order[:-1], order[1:]):
        total += float(C[a, b])
    return total


def solve_exact(matrix, limit: int = EXACT_LIMIT, chunk: int = 1 << 14) -> Solution:
    """Optimal open path by dynamic programming over ``(visited set, last shred)``.

    ``O(2^n n^2)`` time, ``O(2^n n)`` memory; refuses ``n > limit``.
    Path costs accumulate left to right, matching :func:`objective`.
    """
    start = time.perf_counter()
    C = _values(matrix).copy()
    n = C.shape[0]
    if n > limit:
        raise ValueError(f"n = {n} exceeds the exact solver limit {limit}")
    np.fill_diagonal(C, np.inf)
    full = 1 << n
    dp = np.full((full, n), np.inf)
    parent = np.full((full, n), -1, dtype=np.int8)
    for i in range(n):
        dp[1 << i, i] = 0.0
    popcount = _popcounts(n)
    bits = 1 << np.arange(n)
    for size in range(1, n):
        masks = np.flatnonzero(popcount == size)
        for lo in range(0, len(masks), chunk):
            block = masks[lo : lo + chunk]
            # cand[m, last, nxt] = dp[m, last] + C[last, nxt]
            cand = dp[block][:, :, None] + C[None, :, :]
            best_last = cand.argmin(axis=1)
            best_val = np.take_along_axis(cand, best_last[:, None, :], axis=1)[:, 0, :]
            for nxt in range(n):
                free = (block & bits[nxt]) == 0
                if not free.any():
                    continue
                src = block[free]
                dst = src | bits[nxt]
                val = best_val[free, nxt]
                better = val < dp[dst, nxt]
                dp[dst[better], nxt] = val[better]
                parent[dst[better], nxt] = best_last[free, nxt][better]
    last = int(np.argmin(dp[full - 1]))
    order = [last]
    mask = full - 1
    while True:
        prev = int(parent[mask, last])
        if prev < 0:
            break
        mask ^= 1 << last
        last = prev
        order.append(last)
    order.reverse()
    return Solution(order, objective(C, order), "exact", time.perf_counter() - start)


def _popcounts(n: int) -> np.ndarray:
    masks = np.arange(1 << n)
    counts = np.zeros(1 << n, dtype=np.int8)
    for b in range(n):
        counts += ((masks >> b) & 1).astype(np.int8)
    return counts


def nearest_neighbor_path(C: np.ndarray, start: int) -> list[int]:
    n = C.shape[0]
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, C[order[-1]])
        nxt = int(np.argmin(row))
        order.append(nxt)
        visited[nxt] = True
    return order


def _path_cost(C: np.ndarray, order) -> float:
    total = 0.0
    for a, b in zip(order[:-1], order[1:]):
        total += float(C[a, b])
    return total


@njit(cache=True)
def _relocate_descent(C, order, max_segment, tol):
    n = order.shape[0]
    improved = True
    while improved:
        improved = False
        i = 0
        while i < n:
            moved = False
            for j in range(i, min(n - 1, i + max_segment - 1) + 1):
                seg_len = j - i + 1
                if seg_len >= n:
                    break
                first = order[i]
                last = order[j]
                removed = 0.0
                if i > 0:
                    removed += C[order[i - 1], first]
                if j < n - 1:
                    removed += C[last, order[j + 1]]
                if i > 0 and j < n - 1:
                    removed -= C[order[i - 1], order[j + 1]]
                m = n - seg_len
                best_gap = -1
                best_add = np.inf
                # gap g sits between rest[g-1] and rest[g]; rest skips the segment
                for g in range(m + 1):
                    if g == i:
                        continue
                    add = 0.0
                    if g > 0:
                        prev = order[g - 1] if g - 1 < i else order[g - 1 + seg_len]
                        add += C[prev, first]
                    if g < m:
                        nxt = order[g] if g < i else order[g + seg_len]
                        add += C[last, nxt]
                    if 0 < g < m:
                        add -= C[prev, nxt]
                    if add < best_add:
                        best_add = add
                        best_gap = g
                if best_gap >= 0 and best_add < removed - tol:
                    seg = order[i : j + 1].copy()
                    rest = np.empty(m, dtype=order.dtype)
                    rest[:i] = order[:i]
                    rest[i:] = order[j + 1 :]
                    order[:best_gap] = rest[:best_gap]
                    order[best_gap : best_gap + seg_len] = seg
                    order[best_gap + seg_len :] = rest[best_gap:]
                    improved = True
                    moved = True
                    break
            if not moved:
                i += 1
    return order


def improve_by_segment_moves(C: np.ndarray, order, max_segment: int | None = None, tol: float = 1e-12):
    """Relocate contiguous segments (orientation kept) while any move helps.

    Each segment start is tried in turn; for every segment length the best
    insertion gap of the remaining path is taken if it lowers the objective.
    Passes repeat until one finds nothing, so the objective only decreases.
    """
    arr = np.array(order, dtype=np.int64)
    n = len(arr)
    max_segment = n - 1 if max_segment is None else max_segment
    return _relocate_descent(np.ascontiguousarray(C, dtype=np.float64), arr, max_segment, tol).tolist()


def double_bridge(order, rng: np.random.Generator) -> list:
    """``A B C D -> A C B D`` at three random cut points (no reversal)."""
    n = len(order)
    if n < 4:
        return list(order)
    i, j, k = sorted(rng.choice(np.arange(1, n), size=3, replace=False))
    return order[:i] + order[j:k] + order[i:j] + order[k:]


def solve_heuristic(matrix, seed: int = 0, restarts: int = 8, kicks: int | None = None) -> Solution:
    """Nearest-neighbor starts polished by segment moves, then iterated local search.

    Each of ``restarts`` seeded start shreds gives a greedy path that is
    descended to a local optimum; ``kicks`` double-bridge perturbations
    (default ``min(2n, 60, 5e6 / n^3)``, so large instances get few or
    none) follow, each kept only if the re-descended path is strictly
    better.  Deterministic for a given seed.
    """
    start = time.perf_counter()
    C = _values(matrix).copy()
    n = C.shape[0]
    np.fill_diagonal(C, np.inf)
    finite = C[np.isfinite(C)]
    big = (finite.max() if finite.size else 0.0) * n + 1.0
    Cw = np.where(np.isfinite(C), C, big)
    kicks = min(2 * n, 60, int(5e6 / n**3)) if kicks is None else kicks
    rng = np.random.default_rng(seed)
    starts = rng.permutation(n)[: max(1, min(restarts, n))]
    best_order, best_cost = None, np.inf
    for s in starts:
        order = improve_by_segment_moves(Cw, nearest_neighbor_path(Cw, int(s)))
        cost = _path_cost(Cw, order)
        for _ in range(kicks):
            cand = improve_by_segment_moves(Cw, double_bridge(order, rng))
            c = _path_cost(Cw, cand)
            if c < cost:
                order, cost = cand, c
        if cost < best_cost:
            best_order, best_cost = order, cost
    return Solution(best_order, objective(C, best_order), "heuristic", time.perf_counter() - start)


def solve(matrix, exact_limit: int = EXACT_LIMIT, seed: int = 0, restarts: int = 8) -> Solution:
    n = _values(matrix).shape[0]
    if n <= exact_limit:
        return solve_exact(matrix, limit=exact_limit)
    return solve_heuristic(matrix, seed=seed, restarts=restarts)
