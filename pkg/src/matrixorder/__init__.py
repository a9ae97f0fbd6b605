"""Convolution, pooling, recurrence and self-attention as explicit structured sparse matrices."""
from .matcore import (BandedMatrix, BlockLowerTriangular, LiftedAttnMatrix, banded_matvec,
                      block_lt_matvec, dense_matmul, densify, lifted_apply)

__all__ = [
    "BandedMatrix",
    "BlockLowerTriangular",
    "LiftedAttnMatrix",
    "banded_matvec",
    "block_lt_matvec",
    "dense_matmul",
    "densify",
    "lifted_apply",
]
__version__ = "0.1.0"
