"""Dense float64 matrix kernels shared by every other module.

A "matrix" throughout this package is a 2-D, C-contiguous ``numpy.ndarray``
of float64. Operations here are pure: inputs are never mutated and results
are freshly allocated. Softmax is row-wise because attention applies it per
query row, and it always subtracts the row max first so arbitrarily large
scores cannot overflow (shift invariance keeps the result unchanged).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Matrix",
    "ShapeMismatchError",
    "NonFiniteError",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "frobenius_norm",
]

Matrix = np.ndarray


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ValueError):
    """An operand contains NaN or infinite entries."""


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Validate and normalize input into a 2-D C-contiguous float64 array.

    Accepts nested sequences or ndarrays. Empty matrices (0 rows) are
    permitted; they arise from degenerate inputs such as an empty token
    sequence. Rejects non-finite entries.
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} != {b.shape[0]}"
        )
    return a @ b


def softmax_rows(z: Matrix) -> Matrix:
    """Row-wise softmax, numerically stabilized by subtracting each row max.

    Every output row sums to 1 and all entries lie in (0, 1]. The shift by
    the row max changes nothing mathematically (softmax is shift invariant)
    but keeps exp() in range for any finite input.
    """
    z = as_matrix(z, "z")
    if z.shape[0] == 0:
        return z.copy()
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norm(m: Matrix) -> float:
    """Square root of the sum of squared entries."""
    m = as_matrix(m, "m")
    return float(np.linalg.norm(m))
