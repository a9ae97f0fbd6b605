"""Dense and structured-sparse matrix types with their multiplication kernels.

Dense vectors and matrices are plain float64 numpy arrays. The structured types
(:class:`BandedMatrix`, :class:`BlockLowerTriangular`, :class:`LiftedAttnMatrix`)
are immutable once built; their kernels reduce every output row in a fixed,
ascending order so results are bit-reproducible, including under the
row-parallel path.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import scipy.io
import scipy.sparse

DEFAULT_DENSIFY_BUDGET = 2 ** 24


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class BudgetExceededError(ValueError):
    """A dense materialization would exceed the configured element budget."""


def as_vec(x, name: str = "x") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_mat(a, name: str = "a") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass
class OpCounter:
    """Counts multiply-adds performed by the structured kernels."""

    madds: int = 0


@dataclass(frozen=True, eq=False)
class BandedMatrix:
    """Row-wise banded sparse matrix.

    Stored ELL-style: ``col_idx[r, k]`` and ``vals[r, k]`` for ``k < row_nnz[r]``;
    slots past ``row_nnz[r]`` are padding (column 0, value 0.0) and never read
    as entries. ``param_index`` maps every stored slot to the trainable
    parameter feeding it; for a tied convolution all rows share the same
    ``r*r`` indices.
    """

    rows: int
    cols: int
    col_idx: np.ndarray
    vals: np.ndarray
    row_nnz: np.ndarray
    max_row_nnz: int
    param_index: np.ndarray | None = None
    tied: bool = False

    def __post_init__(self):
        col_idx = np.asarray(self.col_idx, dtype=np.int64).reshape(self.rows, -1)
        vals = np.asarray(self.vals, dtype=np.float64).reshape(self.rows, -1)
        row_nnz = np.asarray(self.row_nnz, dtype=np.int64).reshape(self.rows)
        if col_idx.shape != vals.shape:
            raise DimensionError(f"col_idx {col_idx.shape} vs vals {vals.shape}")
        if np.any(row_nnz > self.max_row_nnz) or np.any(row_nnz > col_idx.shape[1]):
            raise ValueError(f"a row exceeds the nonzero bound {self.max_row_nnz}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("band values must be finite")
        live = np.arange(col_idx.shape[1])[None, :] < row_nnz[:, None]
        if np.any(col_idx[live] < 0) or np.any(col_idx[live] >= self.cols):
            raise ValueError(f"column index out of range for {self.cols} columns")
        if col_idx.shape[1] > 1:
            both = live[:, 1:]
            if np.any(np.diff(col_idx, axis=1)[both] <= 0):
                raise ValueError("column indices within a row must be strictly increasing")
        # padding slots are canonicalized so the kernels can read them blindly
        col_idx = np.where(live, col_idx, 0)
        vals = np.where(live, vals, 0.0)
        object.__setattr__(self, "col_idx", _frozen(col_idx))
        object.__setattr__(self, "vals", _frozen(vals))
        object.__setattr__(self, "row_nnz", _frozen(row_nnz))
        if self.param_index is not None:
            pidx = np.asarray(self.param_index, dtype=np.int64).reshape(col_idx.shape)
            object.__setattr__(self, "param_index", _frozen(pidx))

    @classmethod
    def from_rows(cls, rows: int, cols: int, row_entries: Sequence[Sequence[tuple[int, float]]],
                  max_row_nnz: int | None = None) -> "BandedMatrix":
        """Build from per-row ``(col, val)`` lists."""
        if len(row_entries) != rows:
            raise DimensionError(f"expected {rows} rows of entries, got {len(row_entries)}")
        width = max((len(r) for r in row_entries), default=0)
        bound = width if max_row_nnz is None else max_row_nnz
        col_idx = np.zeros((rows, width), dtype=np.int64)
        vals = np.zeros((rows, width))
        for r, entries in enumerate(row_entries):
            for k, (c, v) in enumerate(entries):
                col_idx[r, k] = c
                vals[r, k] = v
        return cls(rows, cols, col_idx, vals, [len(r) for r in row_entries], bound)

    @classmethod
    def from_dense(cls, a, max_row_nnz: int | None = None) -> "BandedMatrix":
        a = as_mat(a)
        entries = [[(int(c), float(a[r, c])) for c in np.flatnonzero(a[r])]
                   for r in range(a.shape[0])]
        return cls.from_rows(a.shape[0], a.shape[1], entries, max_row_nnz)

    @property
    def nnz(self) -> int:
        return int(self.row_nnz.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def row_entries(self, r: int) -> list[tuple[int, float]]:
        k = int(self.row_nnz[r])
        return list(zip(self.col_idx[r, :k].tolist(), self.vals[r, :k].tolist()))

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        live = np.arange(self.col_idx.shape[1])[None, :] < self.row_nnz[:, None]
        r = np.broadcast_to(np.arange(self.rows)[:, None], live.shape)[live]
        return r, self.col_idx[live], self.vals[live]

    def with_values(self, vals: np.ndarray, tied: bool | None = None) -> "BandedMatrix":
        """Same sparsity pattern, new stored values."""
        return BandedMatrix(self.rows, self.cols, self.col_idx, vals, self.row_nnz,
                            self.max_row_nnz, self.param_index,
                            self.tied if tied is None else tied)


@dataclass(frozen=True, eq=False)
class BlockLowerTriangular:
    """T x T grid of M x d blocks; blocks above the diagonal are absent.

    ``blocks`` has shape ``(T, T, M, d)``. Slots with ``j > i`` are held at zero
    and never read.
    """

    t_steps: int
    block_rows: int
    block_cols: int
    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        expect = (self.t_steps, self.t_steps, self.block_rows, self.block_cols)
        if b.shape != expect:
            raise DimensionError(f"blocks shape {b.shape}, expected {expect}")
        if not np.all(np.isfinite(b)):
            raise ValueError("blocks must be finite")
        upper = np.triu(np.ones((self.t_steps, self.t_steps), dtype=bool), k=1)
        b = b.copy()
        b[upper] = 0.0
        object.__setattr__(self, "blocks", _frozen(b))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.t_steps * self.block_rows, self.t_steps * self.block_cols)

    def block(self, i: int, j: int) -> np.ndarray | None:
        if j > i:
            return None
        return self.blocks[i, j]

    @property
    def stored_values(self) -> int:
        t = self.t_steps
        return t * (t + 1) // 2 * self.block_rows * self.block_cols


@dataclass(frozen=True, eq=False)
class LiftedAttnMatrix:
    """Sparse M x N^2 matrix over the lifted input ``x (x) x``.

    Entries are parallel arrays ``(m, i, j, val)``; the densified column of
    ``(i, j)`` is ``i * N + j``.
    """

    out_dim: int
    in_dim: int
    m_idx: np.ndarray
    i_idx: np.ndarray
    j_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m_idx, dtype=np.int64).ravel()
        i = np.asarray(self.i_idx, dtype=np.int64).ravel()
        j = np.asarray(self.j_idx, dtype=np.int64).ravel()
        v = np.asarray(self.vals, dtype=np.float64).ravel()
        if not (m.shape == i.shape == j.shape == v.shape):
            raise DimensionError("entry arrays must have equal length")
        if m.size:
            if m.min() < 0 or m.max() >= self.out_dim:
                raise ValueError("output index out of range")
            if min(i.min(), j.min()) < 0 or max(i.max(), j.max()) >= self.in_dim:
                raise ValueError("input index out of range")
            key = (m * self.in_dim + i) * self.in_dim + j
            if np.unique(key).size != key.size:
                raise ValueError("(m, i, j) triples must be unique")
        if not np.all(np.isfinite(v)):
            raise ValueError("entry values must be finite")
        for name, arr in (("m_idx", m), ("i_idx", i), ("j_idx", j), ("vals", v)):
            object.__setattr__(self, name, _frozen(arr))

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim * self.in_dim)

    def with_values(self, vals: np.ndarray) -> "LiftedAttnMatrix":
        return LiftedAttnMatrix(self.out_dim, self.in_dim, self.m_idx, self.i_idx,
                                self.j_idx, vals)


Structured = Union[BandedMatrix, BlockLowerTriangular, LiftedAttnMatrix]


def _banded_rows(w: BandedMatrix, x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    cols = w.col_idx[lo:hi]
    vals = w.vals[lo:hi]
    out = np.zeros(hi - lo)
    # slot k holds the k-th smallest column of every row: ascending-column reduction
    for k in range(cols.shape[1]):
        out += vals[:, k] * x[cols[:, k]]
    return out


def banded_matvec(w: BandedMatrix, x, *, workers: int = 1,
                  counter: OpCounter | None = None) -> np.ndarray:
    """``W @ x`` for a banded matrix.

    Each row is summed sequentially over its stored entries in ascending column
    order, so splitting rows across ``workers`` threads gives bit-identical
    output.
    """
    x = as_vec(x)
    if x.size != w.cols:
        raise DimensionError(f"banded_matvec: matrix is {w.rows}x{w.cols}, vector has length {x.size}")
    if counter is not None:
        counter.madds += w.nnz
    if workers <= 1 or w.rows < 2 * workers:
        return _banded_rows(w, x, 0, w.rows)
    bounds = np.linspace(0, w.rows, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda lh: _banded_rows(w, x, *lh), zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts)


def banded_matmat(w: BandedMatrix, xs: np.ndarray) -> np.ndarray:
    """Apply ``W`` to a batch of row vectors: ``xs`` is (B, cols), result (B, rows)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != w.cols:
        raise DimensionError(f"banded_matmat: matrix has {w.cols} columns, batch shape {xs.shape}")
    out = np.zeros((xs.shape[0], w.rows))
    for k in range(w.col_idx.shape[1]):
        out += w.vals[:, k] * xs[:, w.col_idx[:, k]]
    return out


def banded_rmatmat(w: BandedMatrix, dys: np.ndarray) -> np.ndarray:
    """Transposed application ``dys @ W``: (B, rows) -> (B, cols)."""
    dys = np.asarray(dys, dtype=np.float64)
    if dys.ndim != 2 or dys.shape[1] != w.rows:
        raise DimensionError(f"banded_rmatmat: matrix has {w.rows} rows, batch shape {dys.shape}")
    out = np.zeros((w.cols, dys.shape[0]))
    for k in range(w.col_idx.shape[1]):
        np.add.at(out, w.col_idx[:, k], (w.vals[:, k] * dys).T)
    return out.T


def banded_value_grad(w: BandedMatrix, xs: np.ndarray, dys: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dys * (xs @ W^T))`` w.r.t. every stored slot; shape of ``w.vals``.

    Padding slots get zero.
    """
    xs = np.asarray(xs, dtype=np.float64)
    dys = np.asarray(dys, dtype=np.float64)
    grad = np.zeros(w.vals.shape)
    for k in range(w.col_idx.shape[1]):
        grad[:, k] = np.einsum("bp,bp->p", dys, xs[:, w.col_idx[:, k]])
    live = np.arange(w.col_idx.shape[1])[None, :] < w.row_nnz[:, None]
    return np.where(live, grad, 0.0)


def tied_grad(w: BandedMatrix, slot_grad: np.ndarray, n_params: int) -> np.ndarray:
    """Sum per-slot gradients into the parameters they share via ``param_index``."""
    if w.param_index is None:
        raise ValueError("matrix carries no parameter map")
    return np.bincount(w.param_index.ravel(), weights=slot_grad.ravel(), minlength=n_params)


def block_lt_matvec(w: BlockLowerTriangular, x, *, counter: OpCounter | None = None) -> np.ndarray:
    """``W @ x`` for a block-lower-triangular matrix; segment t sums j = 0..t in order."""
    x = as_vec(x)
    t, m, d = w.t_steps, w.block_rows, w.block_cols
    if x.size != t * d:
        raise DimensionError(f"block_lt_matvec: expected length {t}*{d}={t * d}, got {x.size}")
    xs = x.reshape(t, d)
    out = np.zeros((t, m))
    for i in range(t):
        for j in range(i + 1):
            out[i] += w.blocks[i, j] @ xs[j]
    if counter is not None:
        counter.madds += w.stored_values
    return out.ravel()


def block_lt_matmat(w: BlockLowerTriangular, xs: np.ndarray) -> np.ndarray:
    """Batched form: ``xs`` is (B, T, d), result (B, T, M)."""
    xs = np.asarray(xs, dtype=np.float64)
    t, m, d = w.t_steps, w.block_rows, w.block_cols
    if xs.ndim != 3 or xs.shape[1:] != (t, d):
        raise DimensionError(f"block_lt_matmat: expected (B, {t}, {d}), got {xs.shape}")
    out = np.zeros((xs.shape[0], t, m))
    for i in range(t):
        for j in range(i + 1):
            out[:, i] += xs[:, j] @ w.blocks[i, j].T
    return out


def lifted_apply(w: LiftedAttnMatrix, x, *, counter: OpCounter | None = None) -> np.ndarray:
    """``y = W (x (x) x)`` evaluated entry by entry; the N^2 lift is never formed."""
    x = as_vec(x)
    if x.size != w.in_dim:
        raise DimensionError(f"lifted_apply: matrix expects length {w.in_dim}, got {x.size}")
    if counter is not None:
        counter.madds += w.nnz
    terms = w.vals * x[w.i_idx] * x[w.j_idx]
    # bincount accumulates in entry order, which is sorted by m
    return np.bincount(w.m_idx, weights=terms, minlength=w.out_dim).astype(np.float64)


def dense_matmul(a, b) -> np.ndarray:
    """Plain matrix product with ascending-index inner reductions."""
    a = as_mat(a, "a")
    b = as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"dense_matmul: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k, :])
    return out


def densify(w: Structured, budget: int = DEFAULT_DENSIFY_BUDGET) -> np.ndarray:
    """Materialize any structured matrix as a dense array (test and export use)."""
    rows, cols = w.shape
    if rows * cols > budget:
        raise BudgetExceededError(f"dense form {rows}x{cols} exceeds budget of {budget} elements")
    out = np.zeros((rows, cols))
    if isinstance(w, BandedMatrix):
        r, c, v = w.coords()
        out[r, c] = v
    elif isinstance(w, BlockLowerTriangular):
        m, d = w.block_rows, w.block_cols
        for i in range(w.t_steps):
            for j in range(i + 1):
                out[i * m:(i + 1) * m, j * d:(j + 1) * d] = w.blocks[i, j]
    elif isinstance(w, LiftedAttnMatrix):
        out[w.m_idx, w.i_idx * w.in_dim + w.j_idx] = w.vals
    else:
        raise TypeError(f"cannot densify {type(w).__name__}")
    return out


# --- Matrix Market -----------------------------------------------------------

def _coo(w: Structured) -> scipy.sparse.coo_matrix:
    if isinstance(w, BandedMatrix):
        r, c, v = w.coords()
    elif isinstance(w, LiftedAttnMatrix):
        r, c, v = w.m_idx, w.i_idx * w.in_dim + w.j_idx, w.vals
    elif isinstance(w, BlockLowerTriangular):
        m, d, t = w.block_rows, w.block_cols, w.t_steps
        ii, jj = np.tril_indices(t)
        rr, cc = np.meshgrid(np.arange(m), np.arange(d), indexing="ij")
        r = (ii[:, None, None] * m + rr[None]).ravel()
        c = (jj[:, None, None] * d + cc[None]).ravel()
        v = w.blocks[ii, jj].ravel()
    else:
        raise TypeError(f"cannot export {type(w).__name__}")
    return scipy.sparse.coo_matrix((v, (r, c)), shape=w.shape)


def write_mtx(w: Structured, path: str | Path) -> None:
    """Write the densified coordinates of ``w`` (stored zeros included)."""
    scipy.io.mmwrite(str(path), _coo(w), symmetry="general", precision=17)


def _read_coo(path: str | Path) -> scipy.sparse.coo_matrix:
    m = scipy.io.mmread(str(path))
    if not scipy.sparse.issparse(m):
        raise ValueError(f"{path}: expected coordinate format")
    return scipy.sparse.coo_matrix(m)


def read_banded(path: str | Path, max_row_nnz: int | None = None) -> BandedMatrix:
    m = _read_coo(path)
    order = np.lexsort((m.col, m.row))
    rows, cols, vals = m.row[order], m.col[order], m.data[order]
    entries = [[] for _ in range(m.shape[0])]
    for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
        entries[r].append((c, v))
    return BandedMatrix.from_rows(m.shape[0], m.shape[1], entries, max_row_nnz)


def read_block_lt(path: str | Path, t_steps: int) -> BlockLowerTriangular:
    m = _read_coo(path)
    rows, cols = m.shape
    if rows % t_steps or cols % t_steps:
        raise DimensionError(f"{rows}x{cols} is not divisible into {t_steps}x{t_steps} blocks")
    dense = m.toarray()
    br, bc = rows // t_steps, cols // t_steps
    blocks = dense.reshape(t_steps, br, t_steps, bc).transpose(0, 2, 1, 3)
    if np.any(blocks[np.triu_indices(t_steps, k=1)]):
        raise ValueError("nonzero block above the diagonal")
    return BlockLowerTriangular(t_steps, br, bc, blocks)


def read_lifted(path: str | Path) -> LiftedAttnMatrix:
    m = _read_coo(path)
    n = int(round(np.sqrt(m.shape[1])))
    if n * n != m.shape[1]:
        raise DimensionError(f"column count {m.shape[1]} is not a perfect square")
    order = np.lexsort((m.col, m.row))
    col = m.col[order]
    return LiftedAttnMatrix(m.shape[0], n, m.row[order], col // n, col % n, m.data[order])
