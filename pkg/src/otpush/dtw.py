"""Dynamic time warping over equal-length action chunks, plus pseudo-pairing.

Local cost is the squared Euclidean distance between chunk rows,
restricted to the position dimensions. Admissible paths start at (1,1),
end at (T,T), and advance by (+1,0), (0,+1) or (+1,+1). The batch cost
matrix drives the row-argmin pseudo-pair assignment used to shape the
transport ground cost.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ChunkedAction
from .numkit import ContractError


@dataclass
class DtwResult:
    """Optimal alignment cost and one realizing path (1-based index pairs)."""

    cost: float
    path: list[tuple[int, int]]


@dataclass
class PseudoPairAssignment:
    """For each target (column) sample j, the source row index minimizing cost.

    Ties break to the lowest row index. ``dtw_costs`` keeps the full
    B_H x B_R matrix so shaping and diagnostics can reuse it.
    """

    pair_index: np.ndarray
    dtw_costs: np.ndarray


def _position_values(chunk: ChunkedAction) -> np.ndarray:
    if isinstance(chunk, ChunkedAction):
        return chunk.positions()
    return np.asarray(chunk, dtype=np.float64)


def dtw_distance(a: ChunkedAction, b: ChunkedAction) -> DtwResult:
    """Minimum cumulative squared distance over monotone alignment paths."""
    av, bv = _position_values(a), _position_values(b)
    if av.shape != bv.shape:
        raise ContractError(f"chunk shapes differ: {av.shape} vs {bv.shape}")
    t = av.shape[0]
    local = _sq_local_cost(av, bv)
    acc = np.empty((t, t))
    move = np.empty((t, t), dtype=np.int8)  # 0=diag, 1=up (i-1), 2=left (j-1)
    acc[0, 0] = local[0, 0]
    move[0, 0] = -1
    for i in range(1, t):
        acc[i, 0] = local[i, 0] + acc[i - 1, 0]
        move[i, 0] = 1
    for j in range(1, t):
        acc[0, j] = local[0, j] + acc[0, j - 1]
        move[0, j] = 2
    for i in range(1, t):
        for j in range(1, t):
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            best, which = diag, 0
            if up < best:
                best, which = up, 1
            if left < best:
                best, which = left, 2
            acc[i, j] = local[i, j] + best
            move[i, j] = which
    path = [(t, t)]
    i = j = t - 1
    while i > 0 or j > 0:
        which = move[i, j]
        if which == 0:
            i, j = i - 1, j - 1
        elif which == 1:
            i -= 1
        else:
            j -= 1
        path.append((i + 1, j + 1))
    path.reverse()
    return DtwResult(cost=float(acc[t - 1, t - 1]), path=path)


def _sq_local_cost(av: np.ndarray, bv: np.ndarray) -> np.ndarray:
    # accumulated per feature dim in index order: bit-identical to the
    # batched kernel and to a plain sequential sum of squares
    out = np.zeros((av.shape[0], bv.shape[0]))
    for k in range(av.shape[1]):
        dk = av[:, k][:, None] - bv[:, k][None, :]
        out += dk * dk
    return out


def dtw_cost_matrix(batch_h, batch_r) -> np.ndarray:
    """All-pairs DTW costs between two chunk batches, as a (B_H, B_R) matrix.

    The dynamic program is vectorized across pairs but performs the same
    per-cell arithmetic as :func:`dtw_distance`, so entries match
    independent per-pair calls exactly.
    """
    ah = _stack_chunks(batch_h)
    ar = _stack_chunks(batch_r)
    if ah.shape[1:] != ar.shape[1:]:
        raise ContractError(f"chunk shapes differ: {ah.shape[1:]} vs {ar.shape[1:]}")
    if ah.shape[0] == 0 or ar.shape[0] == 0:
        return np.zeros((ah.shape[0], ar.shape[0]))
    t = ah.shape[1]
    # local[s, u] holds the (B_H, B_R) squared distances at time pair (s, u);
    # accumulated per feature dim to match the per-pair arithmetic exactly
    local = np.zeros((t, t, ah.shape[0], ar.shape[0]))
    for k in range(ah.shape[2]):
        dk = ah[:, :, k].T[:, None, :, None] - ar[:, :, k].T[None, :, None, :]
        local += dk * dk
    acc = np.empty_like(local)
    acc[0, 0] = local[0, 0]
    for s in range(1, t):
        acc[s, 0] = local[s, 0] + acc[s - 1, 0]
    for u in range(1, t):
        acc[0, u] = local[0, u] + acc[0, u - 1]
    for s in range(1, t):
        for u in range(1, t):
            best = np.minimum(acc[s - 1, u - 1], acc[s - 1, u])
            np.minimum(best, acc[s, u - 1], out=best)
            acc[s, u] = local[s, u] + best
    return acc[t - 1, t - 1]


def _stack_chunks(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return np.asarray(batch, dtype=np.float64)
    return np.stack([_position_values(c) for c in batch])


def mse_cost_matrix(batch_h, batch_r) -> np.ndarray:
    """Pointwise-aligned squared distance between chunks (the pairing ablation)."""
    ah = _stack_chunks(batch_h)
    ar = _stack_chunks(batch_r)
    if ah.shape[1:] != ar.shape[1:]:
        raise ContractError(f"chunk shapes differ: {ah.shape[1:]} vs {ar.shape[1:]}")
    diff = ah[:, None, :, :] - ar[None, :, :, :]
    return np.einsum("ijtk,ijtk->ij", diff, diff)


def pseudo_pairs(cost_matrix: np.ndarray) -> PseudoPairAssignment:
    """Row-argmin per column with lowest-index tie break."""
    a = np.asarray(cost_matrix, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ContractError(f"cost matrix must be non-empty 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("cost matrix has non-finite entries")
    return PseudoPairAssignment(pair_index=np.argmin(a, axis=0), dtw_costs=a)
