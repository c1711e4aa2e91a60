"""Kronecker and row-partitioned Khatri-Rao algebra.

Nothing in here knows about Gaussian processes. A Kronecker matrix is kept as
its list of square factors and a row-wise Khatri-Rao matrix as its list of
``n x m_i`` factors; the expanded ``prod(m_i)``-sized objects are never formed.

Index convention: a flat Kronecker index is the C-order ravel of the
per-dimension index tuple, so factor 0 is the most significant digit. This
matches ``np.kron(F0, np.kron(F1, ...))``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericalOverflowError

logger = logging.getLogger(__name__)

__all__ = [
    "KronMatrix",
    "RowKhatriRao",
    "Selection",
    "kron_matvec",
    "kr_q_select",
    "kr_q_select_log",
    "top_p_kron_eigs",
    "reduce_columns",
    "selected_blocks",
    "hadamard_combine",
    "hadamard_combine_log",
]


@dataclass(frozen=True)
class KronMatrix:
    """Square Kronecker product ``F0 (x) F1 (x) ... (x) F{d-1}``."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if len(factors) == 0:
            raise DimensionError("KronMatrix needs at least one factor")
        for i, f in enumerate(factors):
            if f.ndim != 2 or f.shape[0] != f.shape[1]:
                raise DimensionError(f"factor {i} is not square: shape {f.shape}")
        object.__setattr__(self, "factors", factors)

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def log_size(self):
        """Natural log of the implied dimension (avoids overflow for huge grids)."""
        return float(sum(math.log(m) for m in self.dims))


@dataclass(frozen=True)
class RowKhatriRao:
    """Row-partitioned Khatri-Rao product: row ``j`` is ``kron_i F_i[j, :]``."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(np.asarray(f, dtype=float) for f in self.factors)
        if len(factors) == 0:
            raise DimensionError("RowKhatriRao needs at least one factor")
        n = factors[0].shape[0]
        for i, f in enumerate(factors):
            if f.ndim != 2:
                raise DimensionError(f"factor {i} must be 2-D, got shape {f.shape}")
            if f.shape[0] != n:
                raise DimensionError(
                    f"factor {i} has {f.shape[0]} rows, expected {n} (shared row count)"
                )
        object.__setattr__(self, "factors", factors)

    @property
    def n_rows(self):
        return self.factors[0].shape[0]

    @property
    def dims(self):
        return tuple(f.shape[1] for f in self.factors)


@dataclass(frozen=True)
class Selection:
    """The p selected Kronecker entries.

    ``index_table[j, i]`` is the column of the i-th factor used by selected
    entry ``j``; ``log_values`` holds the logs of the selected Kronecker
    eigenvalues in non-increasing order.
    """

    index_table: np.ndarray
    log_values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.index_table, dtype=np.int64)
        vals = np.asarray(self.log_values, dtype=float)
        if idx.ndim != 2 or vals.ndim != 1 or idx.shape[0] != vals.shape[0]:
            raise DimensionError(
                f"index_table {idx.shape} and log_values {vals.shape} disagree"
            )
        object.__setattr__(self, "index_table", idx)
        object.__setattr__(self, "log_values", vals)

    @property
    def p(self):
        return self.index_table.shape[0]

    @property
    def d(self):
        return self.index_table.shape[1]

    def flat_indices(self, dims):
        """Flat (C-order) Kronecker indices; only sensible for small grids."""
        return np.ravel_multi_index(tuple(self.index_table.T), tuple(dims))


def kron_matvec(K: KronMatrix, v):
    """Multiply a Kronecker matrix by a vector without expanding it.

    Each factor is applied along its own axis of ``v`` reshaped to the grid
    shape, giving ``O(d m^((d+1)/d))`` work.
    """
    v = np.asarray(v, dtype=float)
    dims = K.dims
    if v.ndim != 1 or v.size != math.prod(dims):
        raise DimensionError(
            f"vector of length {v.size} does not match Kronecker size {math.prod(dims)}"
        )
    x = v.reshape(dims)
    for axis, F in enumerate(K.factors):
        x = np.moveaxis(np.tensordot(F, x, axes=([1], [axis])), 0, axis)
    return x.reshape(-1)


def _check_selection(dims, S: Selection):
    if S.d != len(dims):
        raise DimensionError(f"selection has {S.d} columns, expected d={len(dims)}")
    idx = S.index_table
    if idx.size and (idx.min() < 0 or np.any(idx.max(axis=0) >= np.asarray(dims))):
        bad = np.argwhere((idx < 0) | (idx >= np.asarray(dims)))[0]
        raise IndexError(
            f"selection index {idx[bad[0], bad[1]]} out of range for dimension "
            f"{bad[1]} of size {dims[bad[1]]}"
        )


def reduce_columns(Q: KronMatrix, S: Selection):
    """Keep only the eigenvector columns a selection actually references.

    Returns ``(columns, col_index)`` where ``columns[i]`` is ``Q_i[:, uniq_i]``
    and ``col_index[:, i]`` maps each selected entry into ``columns[i]``.
    """
    _check_selection(Q.dims, S)
    columns = []
    col_index = np.empty_like(S.index_table)
    for i, F in enumerate(Q.factors):
        uniq, inv = np.unique(S.index_table[:, i], return_inverse=True)
        columns.append(np.ascontiguousarray(F[:, uniq]))
        col_index[:, i] = inv.reshape(-1)
    c = np.mean([cols.shape[1] for cols in columns]) if columns else 0.0
    logger.debug("distinct eigenvector columns per dimension: mean c = %.2f", c)
    return columns, col_index


def selected_blocks(KR: RowKhatriRao, columns: Sequence[np.ndarray], col_index):
    """Per-dimension blocks ``B_i = KR_i Q_i S_i^T`` from reduced columns."""
    if len(columns) != len(KR.factors):
        raise DimensionError(
            f"{len(columns)} column sets for {len(KR.factors)} Khatri-Rao factors"
        )
    blocks = []
    for i, (F, cols) in enumerate(zip(KR.factors, columns)):
        if F.shape[1] != cols.shape[0]:
            raise DimensionError(
                f"dimension {i}: Khatri-Rao factor has {F.shape[1]} columns but "
                f"eigenvector factor has {cols.shape[0]} rows"
            )
        blocks.append((F @ cols)[:, col_index[:, i]])
    return blocks


def hadamard_combine(blocks):
    """Direct elementwise product of the blocks."""
    out = blocks[0].copy()
    for B in blocks[1:]:
        out *= B
    return out


def _raise_if_nonfinite(out):
    bad = ~np.isfinite(out)
    if bad.any():
        row, col = (int(k) for k in np.argwhere(bad)[0])
        raise NumericalOverflowError(
            f"non-finite entry at (row={row}, column={col}) of a structured product",
            row=row,
            col=col,
        )


def hadamard_combine_log(blocks, log_scale=None):
    """Sign/log-magnitude form of the elementwise product of the blocks.

    ``out = prod(sign(B_i)) * exp(sum(log|B_i|) + log_scale)``; entries where
    any factor is exactly zero are set to zero without touching the logs.
    """
    n, p = blocks[0].shape
    scale = np.zeros(p) if log_scale is None else np.asarray(log_scale, dtype=float)
    if scale.shape != (p,):
        raise DimensionError(f"log_scale has shape {scale.shape}, expected ({p},)")
    if len(blocks) == 1:
        # one factor cannot overflow through the product; keep it exact
        with np.errstate(over="ignore"):
            out = blocks[0] * np.exp(scale)
        _raise_if_nonfinite(out)
        return out
    sign = np.ones((n, p))
    logmag = np.zeros((n, p))
    with np.errstate(divide="ignore"):
        for B in blocks:
            sign *= np.sign(B)
            logmag += np.log(np.abs(B))
    nz = sign != 0
    out = np.zeros((n, p))
    with np.errstate(over="ignore"):
        out[nz] = sign[nz] * np.exp((logmag + scale)[nz])
    _raise_if_nonfinite(out)
    return out


def kr_q_select(KR: RowKhatriRao, Q: KronMatrix, S: Selection):
    """``K_XU Q S^T`` as the Hadamard product of d small products.

    Only the distinct columns of each ``Q_i`` named by the selection are
    multiplied, so the cost is ``O(d n max(p, m_i c))`` rather than
    ``O(n prod(m_i) p)``.
    """
    if KR.dims != Q.dims:
        raise DimensionError(f"Khatri-Rao dims {KR.dims} != Kronecker dims {Q.dims}")
    columns, col_index = reduce_columns(Q, S)
    return hadamard_combine(selected_blocks(KR, columns, col_index))


def kr_q_select_log(KR: RowKhatriRao, Q: KronMatrix, S: Selection, log_scale=None):
    """Overflow-safe :func:`kr_q_select` with an optional per-column log rescale.

    Pass ``log_scale = -0.5 * S.log_values`` to obtain the scaled
    eigenfunction matrix directly.
    """
    if KR.dims != Q.dims:
        raise DimensionError(f"Khatri-Rao dims {KR.dims} != Kronecker dims {Q.dims}")
    columns, col_index = reduce_columns(Q, S)
    return hadamard_combine_log(selected_blocks(KR, columns, col_index), log_scale)


def _top_sorted(values, tuples, keep):
    # descending by value, ties broken by the lexicographically smaller tuple
    keys = [tuples[:, k] for k in range(tuples.shape[1] - 1, -1, -1)]
    order = np.lexsort(keys + [-values])
    return order[:keep]


def top_p_kron_eigs(eigs, p: int) -> Selection:
    """Find the p largest entries of ``kron(eigs[0], ..., eigs[d-1])``.

    Works in log space and truncates the running expansion to ``p`` entries
    after every factor, so the full product vector is never formed.

    Parameters
    ----------
    eigs : sequence of 1-D arrays
        Strictly positive per-dimension eigenvalues.
    p : int
        Number of entries to keep, ``1 <= p <= prod(len(e) for e in eigs)``.

    Returns
    -------
    Selection
        Index tuples and log-values, sorted non-increasingly. Equal values are
        ordered by the lexicographically smaller index tuple.
    """
    eigs = [np.asarray(e, dtype=float).reshape(-1) for e in eigs]
    if not eigs:
        raise DimensionError("need at least one eigenvalue vector")
    p = int(p)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    total = math.prod(e.size for e in eigs)
    if p > total:
        raise ValueError(f"p={p} exceeds the number of Kronecker entries {total}")
    for i, e in enumerate(eigs):
        if e.size == 0 or not np.all(e > 0) or not np.all(np.isfinite(e)):
            raise ValueError(f"eigenvalues of dimension {i} must be finite and > 0")

    logs = [np.log(e) for e in eigs]
    m0 = logs[0].size
    tuples = np.arange(m0, dtype=np.int64)[:, None]
    keep = _top_sorted(logs[0], tuples, min(m0, p))
    vals, tuples = logs[0][keep], tuples[keep]
    for li in logs[1:]:
        mi = li.size
        cand = (vals[:, None] + li[None, :]).reshape(-1)
        parent = np.repeat(np.arange(vals.size), mi)
        child = np.tile(np.arange(mi, dtype=np.int64), vals.size)
        cand_tuples = np.column_stack([tuples[parent], child])
        keep = _top_sorted(cand, cand_tuples, min(cand.size, p))
        vals, tuples = cand[keep], cand_tuples[keep]
    return Selection(index_table=tuples, log_values=vals)
