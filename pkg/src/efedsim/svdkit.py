"""Truncated SVD, rank selection, and low-rank compression arithmetic.

A weight matrix W (m x n) factors as U * diag(sigma) * Vt. Keeping only the
top-k singular triples gives the best rank-k approximation; transmitting the
triple costs (m + n + 1) * k elements instead of m * n. This module owns the
decomposition, the three rank-selection rules (energy target, relative
tolerance, compression-ratio target), and the accuracy bookkeeping for
per-head compression across a layered model.

The exact backend delegates to LAPACK via numpy. A randomized backend
(`fast_svd`) trades exactness for an O(mnr)-flavored operation count; it
reports its own matmul flop count so the complexity claim can be checked
against `exact_svd_flop_estimate` by counting, not by wall clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Matrix, as_matrix

__all__ = [
    "TruncatedSvd",
    "FastSvdResult",
    "svd",
    "fast_svd",
    "exact_svd_flop_estimate",
    "truncate",
    "reconstruct",
    "energy_ratio",
    "rank_for_energy",
    "rank_for_tolerance",
    "compression_ratio",
    "rank_for_compression",
    "total_accuracy",
    "numerical_rank",
    "geometric_spectrum",
    "power_law_spectrum",
    "matrix_with_spectrum",
]

# Singular values below RANK_RTOL * sigma_1 count as numerical zeros.
RANK_RTOL = 1e-10

_ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class TruncatedSvd:
    """The (U_k, sigma_k, Vt_k) triple plus the full singular spectrum.

    `full_sigma` keeps all r = min(m, n) singular values of the original
    matrix so energy ratios stay computable after truncation.
    """

    u_k: Matrix
    sigma_k: np.ndarray
    v_t_k: Matrix
    full_sigma: np.ndarray

    def __post_init__(self):
        u = as_matrix(self.u_k, "u_k")
        vt = as_matrix(self.v_t_k, "v_t_k")
        sig = np.ascontiguousarray(self.sigma_k, dtype=np.float64)
        full = np.ascontiguousarray(self.full_sigma, dtype=np.float64)
        object.__setattr__(self, "u_k", u)
        object.__setattr__(self, "sigma_k", sig)
        object.__setattr__(self, "v_t_k", vt)
        object.__setattr__(self, "full_sigma", full)

        k = sig.shape[0]
        if u.shape[1] != k or vt.shape[0] != k:
            raise ValueError(
                f"inconsistent rank: u_k has {u.shape[1]} columns, "
                f"v_t_k has {vt.shape[0]} rows, sigma_k has {k} values"
            )
        if k < 1:
            raise ValueError("truncation rank must be at least 1")
        if k > full.shape[0]:
            raise ValueError(f"k={k} exceeds r={full.shape[0]}")
        if np.any(sig < 0) or np.any(np.diff(sig) > 0):
            raise ValueError("singular values must be non-negative and descending")
        if not np.array_equal(full[:k], sig):
            raise ValueError("sigma_k must equal the leading entries of full_sigma")
        scale = max(1.0, float(sig[0]) if k else 1.0)
        if np.abs(u.T @ u - np.eye(k)).max() > _ORTHO_TOL * max(1.0, scale):
            raise ValueError("columns of u_k are not orthonormal")
        if np.abs(vt @ vt.T - np.eye(k)).max() > _ORTHO_TOL * max(1.0, scale):
            raise ValueError("rows of v_t_k are not orthonormal")

    @property
    def m(self) -> int:
        return self.u_k.shape[0]

    @property
    def n(self) -> int:
        return self.v_t_k.shape[1]

    @property
    def k(self) -> int:
        return self.sigma_k.shape[0]

    @property
    def r(self) -> int:
        return self.full_sigma.shape[0]


def svd(w: Matrix) -> TruncatedSvd:
    """Full (untruncated, k = r) singular value decomposition of w."""
    w = as_matrix(w, "w")
    if w.size == 0:
        raise ValueError("cannot decompose an empty matrix")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    return TruncatedSvd(u_k=u, sigma_k=s, v_t_k=vt, full_sigma=s)


def truncate(s: TruncatedSvd, k: int) -> TruncatedSvd:
    """Keep the k largest singular triples; the full spectrum is preserved."""
    if not 1 <= k <= s.k:
        raise ValueError(f"k={k} out of range [1, {s.k}]")
    return TruncatedSvd(
        u_k=s.u_k[:, :k].copy(),
        sigma_k=s.sigma_k[:k].copy(),
        v_t_k=s.v_t_k[:k, :].copy(),
        full_sigma=s.full_sigma,
    )


def reconstruct(s: TruncatedSvd) -> Matrix:
    """Rebuild the (approximate) matrix U_k * diag(sigma_k) * Vt_k."""
    return np.ascontiguousarray((s.u_k * s.sigma_k) @ s.v_t_k)


def numerical_rank(s: TruncatedSvd) -> int:
    """Count of singular values above RANK_RTOL * sigma_1."""
    full = s.full_sigma
    if full.shape[0] == 0 or full[0] == 0.0:
        return 0
    return int(np.count_nonzero(full > RANK_RTOL * full[0]))


def energy_ratio(s: TruncatedSvd, k: int) -> float:
    """Fraction of total squared singular mass captured by the top k values.

    A zero matrix has no energy to lose, so its ratio is defined as 1.
    """
    if not 1 <= k <= s.r:
        raise ValueError(f"k={k} out of range [1, {s.r}]")
    sq = s.full_sigma**2
    total = float(sq.sum())
    if total == 0.0:
        return 1.0
    if k == s.r:
        return 1.0
    return float(sq[:k].sum()) / total


def rank_for_energy(s: TruncatedSvd, e: float) -> int:
    """Smallest k whose retained energy reaches fraction e of the total.

    The total is taken over the numerical rank of the matrix, so e = 1.0
    returns the numerical rank rather than chasing noise-floor singular
    values. The guarantee energy_ratio(s, k) >= e therefore holds up to the
    rank threshold's noise contribution (relatively ~RANK_RTOL**2).
    """
    if not 0.0 < e <= 1.0:
        raise ValueError(f"energy target must lie in (0, 1], got {e}")
    rank = numerical_rank(s)
    if rank == 0:
        return 1
    cum = np.cumsum(s.full_sigma[:rank] ** 2)
    target = e * float(cum[-1])
    k = int(np.searchsorted(cum, target)) + 1
    return min(k, rank)


def rank_for_tolerance(s: TruncatedSvd, eps: float) -> int:
    """Smallest k with discarded energy sqrt(sum_{i>k} sigma_i^2) <= eps * ||W||_F."""
    if eps <= 0:
        raise ValueError(f"tolerance must be positive, got {eps}")
    sq = s.full_sigma**2
    total = float(sq.sum())
    bound = (eps**2) * total
    # tail(k) = total - cum(k); find smallest k in [1, r] meeting the bound
    cum = np.cumsum(sq)
    for k in range(1, s.r + 1):
        if total - float(cum[k - 1]) <= bound:
            return k
    return s.r


def compression_ratio(m: int, n: int, k: int) -> float:
    """Stored elements of the rank-k triple relative to the dense matrix."""
    if m < 1 or n < 1 or k < 0:
        raise ValueError(f"invalid dims m={m}, n={n}, k={k}")
    return (m + n + 1) * k / (m * n)


def rank_for_compression(m: int, n: int, ratio: float) -> int:
    """Rank whose triple fits within the target size ratio, floored, min 1.

    Flooring guarantees the realized compression_ratio never exceeds the
    target (except when even k=1 does not fit, where the clamp applies).
    """
    if m < 1 or n < 1:
        raise ValueError(f"invalid dims m={m}, n={n}")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"compression ratio must lie in (0, 1], got {ratio}")
    return max(1, math.floor(m * n * ratio / (m + n + 1)))


def total_accuracy(e) -> float:
    """Model-level accuracy: product over layers of the mean per-head accuracy."""
    e = as_matrix(e, "e")
    if np.any(e < 0) or np.any(e > 1):
        raise ValueError("per-head accuracies must lie in [0, 1]")
    return float(np.prod(e.mean(axis=1)))


# ---------------------------------------------------------------------------
# Synthetic spectra used by analysis sweeps and property tests. Singular
# values of real weight matrices decay rapidly; these two families mimic that.
# ---------------------------------------------------------------------------


def geometric_spectrum(r: int, q: float = 0.8) -> np.ndarray:
    """sigma_i = q**i for i = 1..r."""
    return q ** np.arange(1, r + 1, dtype=np.float64)


def power_law_spectrum(r: int, alpha: float = 1.5) -> np.ndarray:
    """sigma_i = i**(-alpha) for i = 1..r."""
    return np.arange(1, r + 1, dtype=np.float64) ** (-alpha)


def matrix_with_spectrum(m: int, n: int, sigma: np.ndarray, rng) -> Matrix:
    """Random matrix with the prescribed singular values.

    Orthogonal factors come from QR of Gaussian matrices; pads sigma with
    zeros up to r = min(m, n).
    """
    r = min(m, n)
    sig = np.zeros(r)
    sig[: len(sigma)] = sigma[:r]
    qu, _ = np.linalg.qr(rng.standard_normal((m, r)))
    qv, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return np.ascontiguousarray((qu * sig) @ qv.T)


# ---------------------------------------------------------------------------
# Randomized backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FastSvdResult:
    """Rank-k factors from the randomized backend plus its matmul flop count.

    Unlike TruncatedSvd this carries no full spectrum: the randomized method
    never sees singular values beyond its sketch, so energy accounting is
    not available on this path.
    """

    u: Matrix
    sigma: np.ndarray
    v_t: Matrix
    matmul_flops: int


def exact_svd_flop_estimate(m: int, n: int) -> int:
    """Leading-order multiply count of a dense SVD: min(m^2 n, m n^2)."""
    return min(m * m * n, m * n * n)


def fast_svd(w: Matrix, k: int, n_oversample: int = 8, n_power_iter: int = 2,
             seed: int = 0) -> FastSvdResult:
    """Randomized range-finder SVD of rank k.

    Sketches the range of w with a Gaussian test matrix, optionally sharpens
    it with power iterations, then decomposes the small projected matrix.
    Every matrix product's multiply count is tallied into `matmul_flops`.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"k={k} out of range [1, {min(m, n)}]")
    rng = np.random.default_rng(seed)
    ell = min(k + n_oversample, min(m, n))
    flops = 0

    omega = rng.standard_normal((n, ell))
    y = w @ omega
    flops += m * n * ell
    q, _ = np.linalg.qr(y)
    for _ in range(n_power_iter):
        z = w.T @ q
        flops += n * m * ell
        q, _ = np.linalg.qr(w @ z)
        flops += m * n * ell

    b = q.T @ w
    flops += ell * m * n
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    flops += exact_svd_flop_estimate(ell, n)
    u = q @ ub
    flops += m * ell * ell

    return FastSvdResult(
        u=np.ascontiguousarray(u[:, :k]),
        sigma=s[:k].copy(),
        v_t=np.ascontiguousarray(vt[:k, :]),
        matmul_flops=flops,
    )
