"""Softmax verification through fixed-point base-b exponent tables.

The pipeline: shift a score row by its max (softmax is shift invariant, so
probabilities are unchanged and all shifted scores are <= 0), quantize the
non-positive scores to integers q = round(-z' * 2^f), expand q in K base-b
digits, and evaluate exp(-q / 2^f) as a product of K table lookups — table
k holds exp(-d * b^k / 2^f) for every digit d. Workers split the row's
indices; their per-index results are combined by an exact, canonically
ordered summation, so results are bit-identical for any worker count.

The quantization step is the one piece the underlying transform needs but
leaves implicit: scores are reals, digits need integers. With step 2^-f and
|d exp(z)/dz| <= 1 on z <= 0, each unnormalized value is within 2^-(f+1) of
the true one, and normalization at most doubles the damage, so the verdict
bound is 2 * 2^-f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costmodel import counted_matmul
from .tensor import Matrix, as_matrix, softmax_rows

__all__ = [
    "BaseBConfig",
    "ExpTables",
    "VerifyVerdict",
    "CoverageError",
    "build_tables",
    "shift_normalize",
    "quantize",
    "digits",
    "digits_to_value",
    "exp_via_tables",
    "verified_softmax_row",
    "verify_attention_scores",
]


class CoverageError(ValueError):
    """A quantized magnitude does not fit in K base-b digits."""


@dataclass(frozen=True)
class BaseBConfig:
    base: int = 16
    n_digits: int = 4
    frac_bits: int = 8

    def __post_init__(self):
        if self.base < 2:
            raise ValueError(f"base must be >= 2, got {self.base}")
        if self.n_digits < 1:
            raise ValueError(f"digit count must be >= 1, got {self.n_digits}")
        if self.frac_bits < 0:
            raise ValueError(f"frac_bits must be >= 0, got {self.frac_bits}")

    @property
    def q_max(self) -> int:
        return self.base**self.n_digits - 1

    @property
    def coverage(self) -> float:
        """Largest representable magnitude in real (logit) units."""
        return self.q_max / 2.0**self.frac_bits

    @property
    def error_bound(self) -> float:
        """Post-normalization per-element error bound: 2 * 2^-frac_bits."""
        return 2.0 ** (1 - self.frac_bits)


@dataclass(frozen=True)
class ExpTables:
    """Per-digit exponent tables: tables[k][d] = exp(-d * b^k / 2^f)."""

    config: BaseBConfig
    tables: tuple


@dataclass(frozen=True)
class VerifyVerdict:
    max_abs_error: float
    bound: float
    passed: bool


def build_tables(cfg: BaseBConfig) -> ExpTables:
    scale = 2.0**cfg.frac_bits
    d = np.arange(cfg.base, dtype=np.float64)
    tables = tuple(
        np.exp(-d * float(cfg.base**k) / scale) for k in range(cfg.n_digits)
    )
    return ExpTables(config=cfg, tables=tables)


def shift_normalize(z_row) -> tuple[np.ndarray, float]:
    """Subtract the row max: returns (z - max, max) with max entry exactly 0."""
    z = np.asarray(z_row, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] == 0:
        raise ValueError("score row must be a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("score row contains non-finite entries")
    z_hat = float(z.max())
    return z - z_hat, z_hat


def quantize(z_prime, cfg: BaseBConfig) -> np.ndarray:
    """Map non-positive shifted scores to integers round(-z' * 2^f)."""
    z = np.asarray(z_prime, dtype=np.float64)
    if np.any(z > 0):
        raise ValueError("shifted scores must be <= 0")
    q = np.rint(-z * 2.0**cfg.frac_bits).astype(np.int64)
    if np.any(q > cfg.q_max):
        worst = float(z[np.argmax(q)])
        raise CoverageError(
            f"shifted score {worst} needs q={int(q.max())}, beyond the "
            f"{cfg.n_digits}-digit base-{cfg.base} range [0, {cfg.q_max}] "
            f"(coverage {cfg.coverage:g} logit units at f={cfg.frac_bits})"
        )
    return q


def digits(q: int, cfg: BaseBConfig) -> list:
    """Little-endian base-b digits of q, exactly n_digits long."""
    if not 0 <= q <= cfg.q_max:
        raise CoverageError(f"q={q} outside [0, {cfg.q_max}]")
    out = []
    rest = int(q)
    for _ in range(cfg.n_digits):
        rest, d = divmod(rest, cfg.base)
        out.append(d)
    return out


def digits_to_value(ds, cfg: BaseBConfig) -> int:
    """Inverse of `digits`: sum of d_k * b^k."""
    return sum(d * cfg.base**k for k, d in enumerate(ds))


def _exp_via_tables_vec(q: np.ndarray, tables: ExpTables) -> np.ndarray:
    cfg = tables.config
    y = np.ones(q.shape, dtype=np.float64)
    rest = q.copy()
    for k in range(cfg.n_digits):
        y *= tables.tables[k][rest % cfg.base]
        rest //= cfg.base
    return y


def exp_via_tables(q: int, cfg: BaseBConfig, tables: ExpTables | None = None) -> float:
    """exp(-q / 2^f) evaluated as the product of per-digit table entries."""
    if tables is None:
        tables = build_tables(cfg)
    if not 0 <= q <= cfg.q_max:
        raise CoverageError(f"q={q} outside [0, {cfg.q_max}]")
    return float(_exp_via_tables_vec(np.asarray([q], dtype=np.int64), tables)[0])


def verified_softmax_row(z_row, cfg: BaseBConfig, n_workers: int = 1,
                         tables: ExpTables | None = None,
                         claimed=None) -> tuple[np.ndarray, VerifyVerdict]:
    """Table-based softmax of one score row plus a verification verdict.

    Indices are split into n_workers contiguous chunks; each worker produces
    its chunk's unnormalized values and partial sum independently. Combining
    is an exact summation over the full index order, so probabilities do not
    depend on the worker count. The denominator is always >= 1 because the
    row-max entry quantizes to q=0 and contributes exactly 1.

    The verdict compares the table-based probabilities against `claimed`
    when given (tamper detection) and against the direct softmax otherwise
    (self-check of the quantization bound).
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if tables is None:
        tables = build_tables(cfg)
    z_prime, _ = shift_normalize(z_row)
    q = quantize(z_prime, cfg)
    n = q.shape[0]

    ys = np.empty(n, dtype=np.float64)
    partial_sums = []
    for chunk in np.array_split(np.arange(n), n_workers):
        if chunk.size == 0:
            continue
        chunk_y = _exp_via_tables_vec(q[chunk], tables)
        ys[chunk] = chunk_y
        partial_sums.append(math.fsum(chunk_y))
    total = math.fsum(ys)
    probs = ys / total

    if claimed is not None:
        reference = np.asarray(claimed, dtype=np.float64)
        if reference.shape != probs.shape:
            raise ValueError(
                f"claimed row shape {reference.shape} != {probs.shape}"
            )
    else:
        reference = softmax_rows(np.asarray(z_row, dtype=np.float64)[None, :])[0]
    err = float(np.abs(probs - reference).max())
    bound = cfg.error_bound
    return probs, VerifyVerdict(max_abs_error=err, bound=bound, passed=err <= bound)


def verify_attention_scores(q_mat: Matrix, k_mat: Matrix, cfg: BaseBConfig,
                            n_workers: int = 1, claimed=None) -> VerifyVerdict:
    """Recompute scaled Q Kt scores and verify their softmax row by row.

    The score product is re-executed through the counted hierarchical
    multiply (arithmetic recomputation standing in for an external proof of
    the matmul); `claimed` optionally supplies the probability matrix under
    verification.
    """
    q_mat = as_matrix(q_mat, "q")
    k_mat = as_matrix(k_mat, "k")
    if q_mat.shape[1] != k_mat.shape[1]:
        raise ValueError(f"q cols {q_mat.shape[1]} != k cols {k_mat.shape[1]}")
    scores, _reads = counted_matmul(q_mat, np.ascontiguousarray(k_mat.T),
                                    "hierarchical")
    scores = scores / math.sqrt(q_mat.shape[1])
    if claimed is not None:
        claimed = as_matrix(claimed, "claimed")
        if claimed.shape != (scores.shape[0], k_mat.shape[0]):
            raise ValueError(f"claimed shape {claimed.shape} does not match scores")
    tables = build_tables(cfg)
    worst = 0.0
    for i in range(scores.shape[0]):
        row_claim = claimed[i] if claimed is not None else None
        _, verdict = verified_softmax_row(scores[i], cfg, n_workers=n_workers,
                                          tables=tables, claimed=row_claim)
        worst = max(worst, verdict.max_abs_error)
    bound = cfg.error_bound
    return VerifyVerdict(max_abs_error=worst, bound=bound, passed=worst <= bound)
