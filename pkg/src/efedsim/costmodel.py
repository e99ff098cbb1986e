"""Memory-access accounting for matrix products under two read policies.

Centralized counting charges every output element for re-reading its full
input row and column: 2*n*m*k reads for an (m x n) by (n x k) product.
Hierarchical counting reads each global operand element exactly once and
keeps intermediates in block-local storage: m*n + n*k reads. The closed
forms are paired with `counted_matmul`, an instrumented execution that
derives its counts by walking the actual arrays, so the formulas can be
validated by running rather than by restating them.

Bandwidth accounting (weight read + input read + output write) is exposed
under two explicit policies because "read" is ambiguous once a memory
hierarchy and batching enter; reports always name the policy they used.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Literal, Sequence

import numpy as np

from . import tensor
from .svdkit import rank_for_compression
from .tensor import Matrix, ShapeMismatchError, as_matrix

__all__ = [
    "MatmulShape",
    "AccessReport",
    "BandwidthReport",
    "ChainOperand",
    "centralized_reads",
    "federated_reads",
    "reduction",
    "counted_matmul",
    "counted_add",
    "table2",
    "access_report",
    "counted_report",
    "compressed_access",
    "weight_storage",
    "bandwidth_reduce_rate",
    "matrix_chain_reads",
    "ACCOUNTING_POLICIES",
]

ReadPolicy = Literal["centralized", "hierarchical"]

# Policy "transfer-bytes": the weight operand costs its serialized element
# count once per batch; input/output cost one read/write per batch element.
# Policy "multiplication-reads": every batch element pays the hierarchical
# multiplication read count (weights re-read per element) plus its output
# write.
ACCOUNTING_POLICIES = ("transfer-bytes", "multiplication-reads")


@dataclass(frozen=True)
class MatmulShape:
    """Dimensions of a product A(m x n) @ B(n x k)."""

    m: int
    n: int
    k: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.k < 1:
            raise ValueError(f"all dims must be >= 1, got {self}")


@dataclass(frozen=True)
class AccessReport:
    """Read counts for one product under both policies."""

    shape: MatmulShape
    centralized_reads: int
    federated_reads: int
    reduction: float
    source: Literal["analytic", "counted"]


@dataclass(frozen=True)
class BandwidthReport:
    """Total-memory-access comparison at one compression ratio."""

    compression_ratio: float
    k_hat: int
    original_access: int
    optimized_access: int
    reduce_rate: float
    accounting_policy: str


def centralized_reads(s: MatmulShape) -> int:
    """Every output element re-reads its n-row and n-column: 2*n*m*k."""
    return 2 * s.n * s.m * s.k


def federated_reads(s: MatmulShape) -> int:
    """Each global operand element is read once: m*n + n*k."""
    return s.m * s.n + s.n * s.k


def reduction(s: MatmulShape) -> float:
    """Fractional read savings of hierarchical over centralized counting.

    Equals 1 - T_f/T_c, which simplifies to 1 - 1/(2k) - 1/(2m); the n
    dependence cancels.
    """
    return 1.0 - federated_reads(s) / centralized_reads(s)


def counted_matmul(a: Matrix, b: Matrix, policy: ReadPolicy) -> tuple[Matrix, int]:
    """Multiply a @ b while tallying element reads under the given policy.

    The count is accumulated by traversing the operands' actual extents
    (never by evaluating the closed forms), so equality with
    centralized_reads / federated_reads is a genuine cross-check. The
    numeric product is delegated to the shared kernel and is therefore
    identical to tensor.matmul.
    """
    product = tensor.matmul(a, b)
    m, n = a.shape
    k = b.shape[1]
    reads = 0
    if policy == "centralized":
        for i in range(m):
            row_len = a[i, :].shape[0]
            for j in range(k):
                reads += row_len + b[:, j].shape[0]
    elif policy == "hierarchical":
        for row in a:
            reads += row.shape[0]
        for row in b:
            reads += row.shape[0]
    else:
        raise ValueError(f"unknown read policy: {policy!r}")
    return product, reads


def counted_add(a: Matrix, b: Matrix, policy: ReadPolicy) -> tuple[Matrix, int]:
    """Elementwise add with read counting.

    Every output element needs exactly one read of each corresponding
    operand element, so the count is the same under both policies; there is
    no reuse for a hierarchy to exploit.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot add {a.shape} to {b.shape}")
    if policy not in ("centralized", "hierarchical"):
        raise ValueError(f"unknown read policy: {policy!r}")
    reads = 0
    for row_a, row_b in zip(a, b):
        reads += row_a.shape[0] + row_b.shape[0]
    return a + b, reads


def access_report(s: MatmulShape) -> AccessReport:
    """Closed-form report for one shape."""
    return AccessReport(
        shape=s,
        centralized_reads=centralized_reads(s),
        federated_reads=federated_reads(s),
        reduction=reduction(s),
        source="analytic",
    )


def counted_report(a: Matrix, b: Matrix) -> AccessReport:
    """Report built from instrumented execution of both policies."""
    _, t_c = counted_matmul(a, b, "centralized")
    _, t_f = counted_matmul(a, b, "hierarchical")
    return AccessReport(
        shape=MatmulShape(a.shape[0], a.shape[1], b.shape[1]),
        centralized_reads=t_c,
        federated_reads=t_f,
        reduction=1.0 - t_f / t_c,
        source="counted",
    )


def table2(dims: Iterable[int] = (5, 10, 100, 10000)) -> list[AccessReport]:
    """Square-matrix read comparison across a sweep of dimensions."""
    return [access_report(MatmulShape(d, d, d)) for d in dims]


def compressed_access(m: int, n: int, t: int, k_hat: int, hierarchy: bool,
                      compressed: bool) -> int:
    """Reads for W(m x n) @ X(n x t), optionally via the rank-k_hat triple.

    Without a hierarchy every multiply re-reads both inputs; with one, each
    global operand is read once (the diagonal factor stores k_hat elements).
    """
    if min(m, n, t) < 1 or k_hat < 1:
        raise ValueError(f"invalid dims m={m}, n={n}, t={t}, k_hat={k_hat}")
    if not compressed:
        return 2 * m * n * t if not hierarchy else m * n + n * t
    if not hierarchy:
        return 2 * (m + n) * k_hat * t
    return m * k_hat + k_hat + n * k_hat + n * t


def weight_storage(m: int, n: int, k_hat: int, compressed: bool) -> int:
    """Elements held for the weight: dense m*n vs the (m+n+1)*k_hat triple."""
    return (m + n + 1) * k_hat if compressed else m * n


def _total_access(m: int, n: int, t: int, batch: int, k_hat: int | None,
                  policy: str) -> int:
    """Weight read + input read + output write under one accounting policy."""
    io = batch * (n * t + m * t)
    if policy == "transfer-bytes":
        weight = weight_storage(m, n, k_hat, compressed=True) if k_hat else m * n
        return weight + io
    if policy == "multiplication-reads":
        if k_hat:
            per_elem = compressed_access(m, n, t, k_hat, hierarchy=True,
                                         compressed=True)
        else:
            per_elem = compressed_access(m, n, t, 1, hierarchy=True,
                                         compressed=False)
        return batch * (per_elem + m * t)
    raise ValueError(f"unknown accounting policy: {policy!r}")


def bandwidth_reduce_rate(m: int, n: int, t: int, batch: int, ratio: float,
                          policy: str) -> BandwidthReport:
    """Bandwidth saving of rank-k_hat compression at one target ratio.

    reduce_rate = 1 - optimized/original; counts are element-denominated,
    so the 4-byte element size cancels.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    k_hat = rank_for_compression(m, n, ratio)
    original = _total_access(m, n, t, batch, None, policy)
    optimized = _total_access(m, n, t, batch, k_hat, policy)
    rate = float(1 - Fraction(optimized, original))
    return BandwidthReport(
        compression_ratio=ratio,
        k_hat=k_hat,
        original_access=original,
        optimized_access=optimized,
        reduce_rate=rate,
        accounting_policy=policy,
    )


@dataclass(frozen=True)
class ChainOperand:
    """One matrix in a left-to-right product chain.

    A diagonal operand (e.g. the Sigma factor of an SVD triple) stores only
    min(rows, cols) elements, which is what the hierarchical policy charges
    for reading it.
    """

    rows: int
    cols: int
    diagonal: bool = False

    @property
    def stored_elements(self) -> int:
        return min(self.rows, self.cols) if self.diagonal else self.rows * self.cols


def matrix_chain_reads(operands: Sequence[ChainOperand | tuple], hierarchy: bool) -> int:
    """Read count for evaluating a product chain left to right.

    Centralized: each pairwise product pays 2*m*n*k. Hierarchical: each
    global operand is read once and intermediates stay block-local (their
    reads are free; the single final write-back is a write, not a read).
    """
    ops = [o if isinstance(o, ChainOperand) else ChainOperand(*o) for o in operands]
    if not ops:
        raise ValueError("empty chain")
    for left, right in zip(ops, ops[1:]):
        if left.cols != right.rows:
            raise ShapeMismatchError(
                f"chain mismatch: {left.rows}x{left.cols} cannot multiply "
                f"{right.rows}x{right.cols}"
            )
    if hierarchy:
        return sum(op.stored_elements for op in ops)
    reads = 0
    acc_rows = ops[0].rows
    for right in ops[1:]:
        reads += 2 * acc_rows * right.rows * right.cols
    return reads
