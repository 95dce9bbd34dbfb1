"""Shred compatibility from cached boundary embeddings.

For a candidate placement "shred ``j`` right after shred ``i``" the right
boundary embeddings ``R_i`` of ``i`` are compared with the left boundary
embeddings ``L_j`` of ``j`` over ``n_rows = h' - delta_max`` rows, letting
either tensor slide by up to ``delta_max`` rows.  No network runs here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projector import EmbeddingTensor


@dataclass(frozen=True)
class CompatConfig:
    delta_max: int = 3
    squared: bool = True

    def __post_init__(self):
        if self.delta_max < 0:
            raise ValueError("delta_max must be >= 0")


def _rows(t) -> np.ndarray:
    """``(h', d)`` float64 view of an embedding tensor or array."""
    data = t.data if isinstance(t, EmbeddingTensor) else np.asarray(t)
    if data.ndim == 3:
        data = data[:, 0, :]
    return data.astype(np.float64)


def _check_pair(R: np.ndarray, L: np.ndarray, delta_max: int) -> int:
    if R.shape != L.shape:
        raise ValueError(f"embedding shapes differ: {R.shape} vs {L.shape}")
    if delta_max >= R.shape[0]:
        raise ValueError(f"delta_max {delta_max} must be below h' = {R.shape[0]}")
    return R.shape[0] - delta_max


def _distance(a: np.ndarray, b: np.ndarray, squared: bool) -> float:
    # einsum here and in build_cost_matrix reduce in the same order, so the
    # batched matrix agrees bit-for-bit with per-pair calls
    diff = (a - b).reshape(-1)
    sq = float(np.einsum("i,i->", diff, diff))
    return sq if squared else math.sqrt(sq)


def cost_up(R, L, delta_max: int = 3, squared: bool = True) -> float:
    """Slide ``L`` upward: ``R[0:n_rows]`` against ``L[delta:delta + n_rows]``."""
    R, L = _rows(R), _rows(L)
    n_rows = _check_pair(R, L, delta_max)
    return min(_distance(R[:n_rows], L[delta : delta + n_rows], squared) for delta in range(delta_max + 1))


def cost_down(R, L, delta_max: int = 3, squared: bool = True) -> float:
    """Slide ``R`` instead: ``R[delta:delta + n_rows]`` against ``L[0:n_rows]``."""
    R, L = _rows(R), _rows(L)
    n_rows = _check_pair(R, L, delta_max)
    return min(_distance(R[delta : delta + n_rows], L[:n_rows], squared) for delta in range(delta_max + 1))


def cost(R, L, delta_max: int = 3, squared: bool = True) -> float:
    return min(cost_up(R, L, delta_max, squared), cost_down(R, L, delta_max, squared))


@dataclass
class CostMatrix:
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]


def build_cost_matrix(right_embeddings, left_embeddings, cfg: CompatConfig = CompatConfig()) -> CostMatrix:
    """``values[i, j] = cost(R_i, L_j)``; the diagonal is ``+inf``.

    Equal to calling :func:`cost` for every ordered pair (same float
    operations, batched over ``j``), at ``O(n^2 * n_rows * d)`` arithmetic.
    """
    R = [_rows(t) for t in right_embeddings]
    L = [_rows(t) for t in left_embeddings]
    n = len(R)
    if n != len(L) or n < 2:
        raise ValueError("need matching right/left embeddings for at least two shreds")
    shapes = {a.shape for a in R} | {a.shape for a in L}
    if len(shapes) != 1:
        raise ValueError(f"all embeddings must share h' and d; crop shreds to a common height first ({sorted(shapes)})")
    h_rows = R[0].shape[0]
    if cfg.delta_max >= h_rows:
        raise ValueError(f"delta_max {cfg.delta_max} must be below h' = {h_rows}")
    n_rows = h_rows - cfg.delta_max
    Rs = np.stack(R)
    Ls = np.stack(L)
    best = np.full((n, n), np.inf)
    for delta in range(cfg.delta_max + 1):
        # up: R[:n_rows] vs L[delta:]; down: R[delta:] vs L[:n_rows]
        for r_sl, l_sl in ((slice(0, n_rows), slice(delta, delta + n_rows)),
                           (slice(delta, delta + n_rows), slice(0, n_rows))):
            Lflat = Ls[:, l_sl].reshape(n, -1)
            for i in range(n):
                diff = Rs[i, r_sl].reshape(-1) - Lflat
                sq = np.einsum("ij,ij->i", diff, diff)
                np.minimum(best[i], sq, out=best[i])
    if not cfg.squared:
        best = np.sqrt(best)
    np.fill_diagonal(best, np.inf)
    return CostMatrix(best)


def save_cost_matrix(matrix: CostMatrix, path) -> None:
    """CSV: first row ``n``, then one row per shred; ``inf`` on the diagonal."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([matrix.n])
        for row in matrix.values:
            writer.writerow(["inf" if math.isinf(v) else repr(float(v)) for v in row])
    tmp.replace(path)


def load_cost_matrix(path) -> CostMatrix:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    n = int(rows[0][0])
    values = np.array([[float(v) for v in row] for row in rows[1 : n + 1]], dtype=np.float64)
    if values.shape != (n, n):
        raise ValueError(f"{path}: expected {n}x{n} values")
    return CostMatrix(values)
