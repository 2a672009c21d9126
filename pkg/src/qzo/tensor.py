"""Dense float64 matrices and the small linear-algebra surface used here.

Everything is 64-bit and evaluated by one fixed code path per operation, so
repeated evaluation of the same expression is bit-identical. Inputs are
desk-scale, which keeps the underlying BLAS calls single-threaded and
deterministic.
"""

from __future__ import annotations

import numpy as np


class DenseMatrix:
    """Row-major real matrix. Rejects non-finite entries on construction.

    Treated as immutable once shared; operations return new instances.
    A 1-D input is taken as a single row.
    """

    __slots__ = ("a",)

    def __init__(self, values):
        a = np.array(values, dtype=np.float64, order="C")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
        if not np.isfinite(a).all():
            raise ValueError("matrix entries must be finite")
        self.a = a

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "DenseMatrix":
        return cls(np.eye(n))

    def __repr__(self) -> str:
        return f"DenseMatrix({self.rows}x{self.cols})"


def axpy(y: DenseMatrix, a: float, x: DenseMatrix) -> DenseMatrix:
    """Elementwise y + a*x as a new matrix."""
    if y.a.shape != x.a.shape:
        raise ValueError(f"shape mismatch: {y.a.shape} vs {x.a.shape}")
    return DenseMatrix(y.a + a * x.a)


def matvec(w: DenseMatrix, x) -> np.ndarray:
    """Matrix-vector product with a fixed sequential accumulation order."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1 or xv.shape[0] != w.cols:
        raise ValueError(f"shape mismatch: {w.rows}x{w.cols} @ {xv.shape}")
    return w.a @ xv
