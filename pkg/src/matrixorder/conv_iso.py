"""Convolution and average-pooling layers as banded matrices, and the reverse map.

Two placement modes are supported. ``paper_literal`` slides the flattened
offset set ``{i*n + j}`` along the flattened image with stride ``s``; its windows
may wrap across image rows. ``valid2d`` keeps one row per in-bounds 2-D kernel
placement and is the mode that equals a 2-D cross-correlation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .matcore import BandedMatrix, DimensionError, as_mat, banded_matvec


class ConvMode(str, Enum):
    PAPER_LITERAL = "paper_literal"
    VALID2D = "valid2d"


class NotTiedError(ValueError):
    """The banded matrix is not a single shared-kernel convolution."""


@dataclass(frozen=True, eq=False)
class ConvSpec:
    img_h: int
    img_w: int
    kernel: np.ndarray
    stride: int = 1
    mode: ConvMode = ConvMode.VALID2D
    tied: bool = True

    def __post_init__(self):
        k = as_mat(self.kernel, "kernel")
        if k.shape[0] != k.shape[1]:
            raise ValueError(f"kernel must be square, got {k.shape}")
        if k.shape[0] > min(self.img_h, self.img_w):
            raise ValueError(f"{k.shape[0]}x{k.shape[0]} kernel larger than {self.img_h}x{self.img_w} image")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "mode", ConvMode(self.mode))

    @property
    def r(self) -> int:
        return self.kernel.shape[0]

    def with_kernel(self, kernel) -> "ConvSpec":
        return ConvSpec(self.img_h, self.img_w, kernel, self.stride, self.mode, self.tied)


@dataclass(frozen=True)
class PoolSpec:
    img_h: int
    img_w: int
    p: int

    def __post_init__(self):
        if self.p < 1 or self.img_h % self.p or self.img_w % self.p:
            raise ValueError(f"window {self.p} must divide both {self.img_h} and {self.img_w}")


def kernel_offsets(r: int, n: int) -> np.ndarray:
    """Flattened offsets ``i*n + j`` for 0 <= i, j < r, in row-major (i, j) order."""
    i, j = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    return (i * n + j).ravel()


def paper_literal_rows(spec: ConvSpec) -> int:
    """Number of sliding positions ``floor((L - max offset) / s) + 1``."""
    length = spec.img_h * spec.img_w
    return (length - int(kernel_offsets(spec.r, spec.img_w).max())) // spec.stride + 1


def conv_row_starts(spec: ConvSpec) -> np.ndarray:
    """Flattened column of each row's first tap (kernel position (0, 0))."""
    if spec.mode is ConvMode.PAPER_LITERAL:
        return np.arange(paper_literal_rows(spec)) * spec.stride
    u = np.arange(0, spec.img_h - spec.r + 1, spec.stride)
    v = np.arange(0, spec.img_w - spec.r + 1, spec.stride)
    return (u[:, None] * spec.img_w + v[None, :]).ravel()


def conv_output_shape(spec: ConvSpec) -> tuple[int, int]:
    """2-D shape of the valid2d output map."""
    return ((spec.img_h - spec.r) // spec.stride + 1, (spec.img_w - spec.r) // spec.stride + 1)


def build_wconv(spec: ConvSpec) -> BandedMatrix:
    """Banded convolution matrix for ``spec``.

    In paper_literal mode the row-count formula admits one more sliding
    position than fits when ``s`` divides ``L - max offset``; that row's final
    tap would read column ``L`` and is dropped (the input is taken as zero past
    its end). Offsets are increasing, so only trailing slots are ever cut.
    """
    r2 = spec.r * spec.r
    length = spec.img_h * spec.img_w
    cols = conv_row_starts(spec)[:, None] + kernel_offsets(spec.r, spec.img_w)[None, :]
    rows = cols.shape[0]
    row_nnz = (cols < length).sum(axis=1)
    vals = np.broadcast_to(spec.kernel.ravel(), (rows, r2))
    if spec.tied:
        pidx = np.broadcast_to(np.arange(r2), (rows, r2))
    else:
        pidx = np.arange(rows * r2).reshape(rows, r2)
    return BandedMatrix(rows, length, np.minimum(cols, length - 1), vals, row_nnz, r2,
                        param_index=pidx, tied=spec.tied)


def build_wpool(spec: PoolSpec) -> BandedMatrix:
    """Average pooling over non-overlapping p x p windows, enumerated row-major."""
    p, n = spec.p, spec.img_w
    qu = np.arange(spec.img_h // p)
    qv = np.arange(n // p)
    starts = (qu[:, None] * p * n + qv[None, :] * p).ravel()
    cols = starts[:, None] + kernel_offsets(p, n)[None, :]
    rows = cols.shape[0]
    vals = np.full((rows, p * p), 1.0 / (p * p))
    return BandedMatrix(rows, spec.img_h * n, cols, vals, np.full(rows, p * p), p * p)


def conv_forward(w: BandedMatrix, x, activation: str = "none") -> np.ndarray:
    y = banded_matvec(w, x)
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return y


def extract_kernel(w: BandedMatrix, spec: ConvSpec) -> np.ndarray:
    """Recover the r x r kernel from a tied convolution matrix.

    ``spec`` supplies geometry only; its kernel values are ignored. Raises
    :class:`NotTiedError` if the sparsity pattern differs from the geometry or
    any row disagrees with the first.
    """
    r2 = spec.r * spec.r
    expected = build_wconv(spec)
    if w.shape != expected.shape:
        raise NotTiedError(f"shape {w.shape} does not match geometry {expected.shape}")
    if (w.col_idx.shape[1] < r2 or not np.array_equal(w.row_nnz, expected.row_nnz)
            or not np.array_equal(w.col_idx[:, :r2], expected.col_idx)):
        raise NotTiedError("sparsity pattern does not match the convolution geometry")
    vals = w.vals[:, :r2]
    live = np.arange(r2)[None, :] < w.row_nnz[:, None]
    bad = np.flatnonzero(np.any(live & (vals != vals[0]), axis=1))
    if bad.size:
        raise NotTiedError(f"row {int(bad[0])} disagrees with row 0; matrix is not a tied convolution")
    return vals[0].reshape(spec.r, spec.r).copy()


# --- direct oracles -------------------------------------------------------------

def oracle_conv2d(image, kernel, stride: int = 1) -> np.ndarray:
    """Nested-loop valid cross-correlation ``Y[u,v] = sum k[i,j] X[u*s+i, v*s+j]``.

    Each window sum is correctly rounded (``math.fsum``), so the result is
    independent of any particular summation order.
    """
    x = as_mat(image, "image")
    k = as_mat(kernel, "kernel")
    r = k.shape[0]
    oh = (x.shape[0] - r) // stride + 1
    ow = (x.shape[1] - r) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"kernel {k.shape} larger than image {x.shape}")
    kl = k.tolist()
    xl = x.tolist()
    out = np.empty((oh, ow))
    for a in range(oh):
        for b in range(ow):
            u, v = a * stride, b * stride
            out[a, b] = math.fsum(kl[i][j] * xl[u + i][v + j] for i in range(r) for j in range(r))
    return out


def oracle_avgpool(image, p: int) -> np.ndarray:
    """Mean of each non-overlapping p x p window."""
    x = as_mat(image, "image")
    h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"window {p} does not divide {x.shape}")
    out = np.empty((h // p, w // p))
    for a in range(h // p):
        for b in range(w // p):
            out[a, b] = math.fsum(x[a * p:(a + 1) * p, b * p:(b + 1) * p].ravel().tolist()) / (p * p)
    return out
