"""CSR batches of sparse basic features and the sparse fully-connected layer.

The forward and backward passes touch only the weight rows named by the
nonzero column indices, so their cost scales with the nonzero count
rather than with the feature dimensionality.  Both are verified against
the densified dense path in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Array, DimensionError, LayerParams


@dataclass
class SparseBatch:
    """A batch of sparse feature rows in compressed sparse row form."""

    num_rows: int
    dim: int
    row_offsets: Array  # int64, length num_rows + 1
    col_indices: Array  # int64, strictly increasing within each row
    values: Array  # float64

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    def row(self, r: int):
        """(indices, values) of one row."""
        sl = slice(self.row_offsets[r], self.row_offsets[r + 1])
        return self.col_indices[sl], self.values[sl]

    def row_slice(self, start: int, stop: int) -> "SparseBatch":
        """A new batch covering rows [start, stop)."""
        lo, hi = self.row_offsets[start], self.row_offsets[stop]
        return SparseBatch(
            num_rows=stop - start,
            dim=self.dim,
            row_offsets=self.row_offsets[start : stop + 1] - lo,
            col_indices=self.col_indices[lo:hi],
            values=self.values[lo:hi],
        )

    def to_dense(self) -> Array:
        """Densify to a (num_rows, dim) array; test oracle and benchmark path."""
        out = np.zeros((self.num_rows, self.dim))
        for r in range(self.num_rows):
            idx, val = self.row(r)
            out[r, idx] = val
        return out


def csr_from_rows(rows, dim: int) -> SparseBatch:
    """Build a canonical CSR batch from per-row (index, value) lists.

    Indices are sorted within each row; duplicates within a row and
    out-of-range indices are rejected.
    """
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    cols = []
    vals = []
    for r, row in enumerate(rows):
        if row:
            pairs = sorted(row)
            idx = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
            if idx[0] < 0 or idx[-1] >= dim:
                raise ValueError(f"row {r}: feature index outside [0, {dim})")
            if len(idx) > 1 and np.any(idx[1:] == idx[:-1]):
                raise ValueError(f"row {r}: duplicate feature index")
            cols.append(idx)
            vals.append(np.fromiter((p[1] for p in pairs), dtype=np.float64, count=len(pairs)))
        offsets[r + 1] = offsets[r] + len(row)
    return SparseBatch(
        num_rows=len(rows),
        dim=dim,
        row_offsets=offsets,
        col_indices=np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64),
        values=np.concatenate(vals) if vals else np.zeros(0),
    )


def csr_from_arrays(index_arrays, value_arrays, dim: int) -> SparseBatch:
    """Assemble a batch from pre-validated per-row index/value arrays.

    Fast path for batch sampling; rows must already be sorted and
    duplicate-free (the loaders guarantee this).
    """
    offsets = np.zeros(len(index_arrays) + 1, dtype=np.int64)
    for r, idx in enumerate(index_arrays):
        offsets[r + 1] = offsets[r] + len(idx)
    return SparseBatch(
        num_rows=len(index_arrays),
        dim=dim,
        row_offsets=offsets,
        col_indices=np.concatenate(index_arrays) if index_arrays else np.zeros(0, dtype=np.int64),
        values=np.concatenate(value_arrays) if value_arrays else np.zeros(0),
    )


def sparse_fc_forward(v: SparseBatch, p: LayerParams) -> Array:
    """Per row: sum of weight rows selected by the nonzero indices, scaled
    by the values, plus bias.  Never materializes a dense batch."""
    if v.dim != p.weights.shape[0]:
        raise DimensionError(f"batch dim {v.dim} != weight rows {p.weights.shape[0]}")
    out = np.tile(p.bias, (v.num_rows, 1))
    ro, ci, val, w = v.row_offsets, v.col_indices, v.values, p.weights
    for r in range(v.num_rows):
        lo, hi = ro[r], ro[r + 1]
        if hi > lo:
            out[r] += val[lo:hi] @ w[ci[lo:hi]]
    return out


def sparse_fc_backward(v: SparseBatch, p: LayerParams, grad_out: Array) -> None:
    """Accumulate gradients only at the weight rows named by the nonzero
    indices.  The sparse input is a graph leaf, so there is no input
    gradient."""
    if grad_out.shape != (v.num_rows, p.weights.shape[1]):
        raise DimensionError(
            f"grad_out {grad_out.shape} inconsistent with ({v.num_rows}, {p.weights.shape[1]})"
        )
    ro, ci, val, gw = v.row_offsets, v.col_indices, v.values, p.grad_weights
    for r in range(v.num_rows):
        lo, hi = ro[r], ro[r + 1]
        if hi > lo:
            # Indices are unique within a row, so fancy-index += is safe.
            gw[ci[lo:hi]] += val[lo:hi, None] * grad_out[r]
    p.grad_bias += grad_out.sum(axis=0)
