"""Single-head self-attention as a third-order tensor and as a lifted sparse matrix.

Two forms are provided:

* :func:`assemble_t_att` folds the softmax weights and the input into an
  N x N x d tensor for one specific input. Contracting it against the value
  projection reproduces softmax attention at that input.
* :func:`build_w_sa` builds the input-independent M x N^2 matrix of linearized
  (softmax-free) attention acting on ``x (x) x``, with entries restricted to
  pairs inside the same patch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data2matrix import TokenEmbedMatrix
from .matcore import DimensionError, LiftedAttnMatrix, as_mat


@dataclass(frozen=True, eq=False)
class AttnSpec:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        mats = [as_mat(getattr(self, n), n) for n in ("w_q", "w_k", "w_v")]
        d = mats[0].shape[0]
        for name, m in zip(("w_q", "w_k", "w_v"), mats):
            if m.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {m.shape}")
            object.__setattr__(self, name, m)

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True, eq=False)
class AttnTensor:
    """``values[k, i, j] = A[k, i] * X[i, j]`` for the input it was assembled at."""

    values: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def _check_x(spec: AttnSpec, x) -> np.ndarray:
    xv = x.values if isinstance(x, TokenEmbedMatrix) else as_mat(x, "x")
    if xv.shape[1] != spec.dim:
        raise DimensionError(f"input has {xv.shape[1]} features, projections expect {spec.dim}")
    return xv


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention_weights(spec: AttnSpec, x) -> np.ndarray:
    xv = _check_x(spec, x)
    q = xv @ spec.w_q
    k = xv @ spec.w_k
    return softmax_rows(q @ k.T / np.sqrt(spec.dim))


def oracle_attention(spec: AttnSpec, x) -> np.ndarray:
    """Standard scaled dot-product attention ``softmax(QK^T / sqrt d) V``."""
    xv = _check_x(spec, x)
    return attention_weights(spec, xv) @ (xv @ spec.w_v)


def assemble_t_att(spec: AttnSpec, x) -> AttnTensor:
    xv = _check_x(spec, x)
    a = attention_weights(spec, xv)
    return AttnTensor(a[:, :, None] * xv[None, :, :])


def contract_t_att(t: AttnTensor, w_v) -> np.ndarray:
    """``Z[k, :] = sum_i sum_j T[k, i, j] * w_v[j, :]``."""
    w_v = as_mat(w_v, "w_v")
    if w_v.shape[0] != t.dim:
        raise DimensionError(f"w_v has {w_v.shape[0]} rows, tensor depth is {t.dim}")
    return np.einsum("kij,jc->kc", t.values, w_v)


# --- lifted form ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LiftedSpec:
    """``w_q``, ``w_v`` are M x N; ``w_k`` is N x N. ``patch_groups`` partitions range(N)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    patch_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        q, k, v = as_mat(self.w_q, "w_q"), as_mat(self.w_k, "w_k"), as_mat(self.w_v, "w_v")
        m, n = q.shape
        if v.shape != (m, n) or k.shape != (n, n):
            raise DimensionError(f"need w_q, w_v of {m}x{n} and w_k of {n}x{n}; "
                                 f"got {q.shape}, {k.shape}, {v.shape}")
        groups = self.patch_groups if self.patch_groups is not None else (tuple(range(n)),)
        groups = tuple(tuple(int(i) for i in g) for g in groups)
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(n)):
            raise ValueError(f"patch_groups must partition 0..{n - 1} exactly once")
        for name, arr in (("w_q", q), ("w_k", k), ("w_v", v)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "patch_groups", groups)

    @property
    def n(self) -> int:
        return self.w_q.shape[1]

    @property
    def m(self) -> int:
        return self.w_q.shape[0]

    def patch_of(self) -> np.ndarray:
        label = np.empty(self.n, dtype=np.int64)
        for g, members in enumerate(self.patch_groups):
            label[list(members)] = g
        return label


def contiguous_patches(n: int, size: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(range(s, min(s + size, n))) for s in range(0, n, size))


def build_w_sa(spec: LiftedSpec) -> LiftedAttnMatrix:
    """Entry (m, i, j) = w_v[m, j] * w_k[j, i] * w_q[m, i] for i, j in one patch.

    Every within-patch triple is stored, zero-valued or not, so the stored
    count is exactly ``M * sum(|patch|^2)``.
    """
    label = spec.patch_of()
    ii, jj = np.nonzero(label[:, None] == label[None, :])
    m = np.repeat(np.arange(spec.m), ii.size)
    i = np.tile(ii, spec.m)
    j = np.tile(jj, spec.m)
    vals = spec.w_v[m, j] * spec.w_k[j, i] * spec.w_q[m, i]
    return LiftedAttnMatrix(spec.m, spec.n, m, i, j, vals)


def oracle_lifted(spec: LiftedSpec, x) -> np.ndarray:
    """Direct triple loop ``y_m = sum_{i,j} w_v[m,j] w_k[j,i] w_q[m,i] x_i x_j`` over same-patch pairs."""
    x = np.asarray(x, dtype=np.float64)
    label = spec.patch_of().tolist()
    wq, wk, wv, xl = spec.w_q.tolist(), spec.w_k.tolist(), spec.w_v.tolist(), x.tolist()
    y = np.zeros(spec.m)
    for m in range(spec.m):
        acc = 0.0
        for i in range(spec.n):
            for j in range(spec.n):
                if label[i] == label[j]:
                    acc += wv[m][j] * wk[j][i] * wq[m][i] * xl[i] * xl[j]
        y[m] = acc
    return y


def lift(x) -> np.ndarray:
    """Materialized ``x (x) x`` (index i*N + j); for tests and the reference bench path."""
    x = np.asarray(x, dtype=np.float64)
    return np.outer(x, x).ravel()


def lifted_jacobian(w: LiftedAttnMatrix, x) -> np.ndarray:
    """Analytic ``dy_m / dx_p``: each entry contributes val*x_j at p=i and val*x_i at p=j."""
    x = np.asarray(x, dtype=np.float64)
    jac = np.zeros((w.out_dim, w.in_dim))
    np.add.at(jac, (w.m_idx, w.i_idx), w.vals * x[w.j_idx])
    np.add.at(jac, (w.m_idx, w.j_idx), w.vals * x[w.i_idx])
    return jac


def patch_entry_count(m: int, groups: Sequence[Sequence[int]]) -> int:
    return m * sum(len(g) ** 2 for g in groups)
