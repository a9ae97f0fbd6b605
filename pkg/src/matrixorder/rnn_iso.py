"""Linear recurrence ``h_t = U x_t + V h_{t-1}`` unrolled into one block-lower-triangular matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data2matrix import SeriesMatrix
from .matcore import BlockLowerTriangular, DimensionError, as_mat, block_lt_matvec


@dataclass(frozen=True, eq=False)
class RnnSpec:
    """``w_xh`` is U (M x d), ``w_hh`` is V (M x M)."""

    t_steps: int
    w_xh: np.ndarray
    w_hh: np.ndarray

    def __post_init__(self):
        u = as_mat(self.w_xh, "w_xh")
        v = as_mat(self.w_hh, "w_hh")
        if v.shape != (u.shape[0], u.shape[0]):
            raise DimensionError(f"w_hh must be {u.shape[0]}x{u.shape[0]}, got {v.shape}")
        object.__setattr__(self, "w_xh", u)
        object.__setattr__(self, "w_hh", v)

    @property
    def in_dim(self) -> int:
        return self.w_xh.shape[1]

    @property
    def hid_dim(self) -> int:
        return self.w_xh.shape[0]


def build_wrnn(spec: RnnSpec) -> BlockLowerTriangular:
    """Block (t, j) = V^(t-j) U for j <= t.

    Column j is built down the diagonal by left-multiplying by V, so
    ``block(t, j) == V @ block(t-1, j)`` holds bit for bit.
    """
    t = spec.t_steps
    if t < 1:
        raise ValueError("t_steps must be >= 1")
    m, d = spec.w_xh.shape
    powers = np.empty((t, m, d))
    powers[0] = spec.w_xh
    for k in range(1, t):
        powers[k] = spec.w_hh @ powers[k - 1]
    blocks = np.zeros((t, t, m, d))
    for i in range(t):
        for j in range(i + 1):
            blocks[i, j] = powers[i - j]
    return BlockLowerTriangular(t, m, d, blocks)


def rnn_forward_matrix(w: BlockLowerTriangular, x) -> np.ndarray:
    """Stacked hidden states ``vec H = W vec X``; no nonlinearity."""
    return block_lt_matvec(w, x)


def oracle_rnn(spec: RnnSpec, x_seq: SeriesMatrix | np.ndarray, activation: str = "none") -> np.ndarray:
    """Step-by-step recurrence from h_0 = 0. Returns the T x M hidden states."""
    xs = x_seq.values if isinstance(x_seq, SeriesMatrix) else np.asarray(x_seq, dtype=np.float64)
    if xs.shape != (spec.t_steps, spec.in_dim):
        raise DimensionError(f"sequence shape {xs.shape}, expected ({spec.t_steps}, {spec.in_dim})")
    if activation not in ("none", "tanh"):
        raise ValueError(f"unknown activation {activation!r}")
    h = np.zeros(spec.hid_dim)
    out = np.empty((spec.t_steps, spec.hid_dim))
    for t in range(spec.t_steps):
        h = spec.w_xh @ xs[t] + spec.w_hh @ h
        if activation == "tanh":
            h = np.tanh(h)
        out[t] = h
    return out
