"""Dense kernels behind the low-rank pipeline.

Matrices are plain 2-D ``float64`` numpy arrays. The containers here
(:class:`LowRankPair`, :class:`PermutedSkipFactors`, ...) are frozen
dataclasses that validate shapes once on construction.

Block skipping rewrites ``B @ A @ x`` as ``B' @ (x1 + A' @ x2)`` where the
columns of ``A`` have been permuted so the leading ``r x r`` block is well
conditioned; ``B' = B @ A1`` and ``A' = inv(A1) @ A2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    DomainError,
    IllConditionedBlockError,
    NumericError,
    RankDeficiencyError,
    SvdConvergenceError,
)
from .precision import Arithmetic

__all__ = [
    "as_matrix",
    "SvdResult",
    "LowRankPair",
    "Permutation",
    "PermutedSkipFactors",
    "svd",
    "truncated_svd",
    "strong_rrqr",
    "skip_transform",
    "skip_code",
    "skip_project",
    "skip_forward",
    "schur_complement",
    "schur_identity_check",
    "DEFAULT_RRQR_F",
    "COND_LIMIT",
]

DEFAULT_RRQR_F = 2.0
COND_LIMIT = 1e12
RANK_TOL = 1e-12


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array or raise DomainError."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DomainError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DomainError(f"{name} contains NaN or Inf entries")
    return m


def _as_columns(x, rows: int, name: str = "x") -> tuple[np.ndarray, bool]:
    v = np.asarray(x, dtype=np.float64)
    was_vector = v.ndim == 1
    if was_vector:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] != rows:
        raise DomainError(f"{name} must have {rows} rows, got shape {np.shape(x)}")
    return v, was_vector


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray

    @property
    def rank(self) -> int:
        """Number of nonzero singular values (exact zero test)."""
        return int(np.count_nonzero(self.singular_values))


@dataclass(frozen=True)
class LowRankPair:
    """``W ~= B @ A`` with ``B`` of shape (d_out, r) and ``A`` of shape (r, d_in)."""

    B: np.ndarray
    A: np.ndarray

    def __post_init__(self) -> None:
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise DomainError(
                f"incompatible factor shapes B{self.B.shape} and A{self.A.shape}"
            )
        if self.rank > min(self.d_out, self.d_in):
            raise DomainError(
                f"rank {self.rank} exceeds min(d_out, d_in) = {min(self.d_out, self.d_in)}"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def param_count(self) -> int:
        return self.B.size + self.A.size

    def dense(self) -> np.ndarray:
        return self.B @ self.A

    def forward(self, x, arithmetic: Arithmetic | None = None) -> np.ndarray:
        ar = arithmetic or Arithmetic("fp64")
        cols, was_vector = _as_columns(x, self.d_in)
        z = ar.matmul(ar.store(self.A, "weight:A"), ar.store(cols, "input"), "lowrank:A")
        y = ar.matmul(ar.store(self.B, "weight:B"), z, "lowrank:B")
        return y[:, 0] if was_vector else y


@dataclass(frozen=True)
class Permutation:
    """Column order ``indices``: column ``j`` of ``A @ P`` is column ``indices[j]`` of ``A``."""

    indices: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or (idx.size and not np.issubdtype(idx.dtype, np.integer)):
            raise DomainError("permutation indices must be a 1-D integer sequence")
        idx = idx.astype(np.int64)
        n = idx.size
        seen = np.zeros(n, dtype=bool)
        if n and (idx.min() < 0 or idx.max() >= n):
            raise DomainError(f"permutation indices must lie in [0, {n})")
        seen[idx] = True
        if not seen.all():
            raise DomainError("permutation indices are not distinct")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n, dtype=np.int64))

    def __len__(self) -> int:
        return self.indices.size

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.indices, np.arange(self.indices.size)))

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.indices)
        inv[self.indices] = np.arange(self.indices.size)
        return Permutation(inv)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return ``P.T @ x`` (rows of ``x`` gathered into permuted order)."""
        return np.asarray(x)[self.indices]

    def unapply(self, x: np.ndarray) -> np.ndarray:
        """Return ``P @ x``, the inverse of :meth:`apply`."""
        return np.asarray(x)[self.inverse().indices]

    def permute_columns(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a)[:, self.indices]


@dataclass(frozen=True)
class PermutedSkipFactors:
    """Block-skipping factors ``y = B' (x1 + A' x2)`` with ``x~ = P.T x``."""

    B_prime: np.ndarray
    A_prime: np.ndarray
    perm: Permutation

    def __post_init__(self) -> None:
        r = self.B_prime.shape[1]
        if self.A_prime.shape[0] != r:
            raise DomainError(
                f"A_prime has {self.A_prime.shape[0]} rows but B_prime has {r} columns"
            )
        if len(self.perm) != r + self.A_prime.shape[1]:
            raise DomainError(
                f"permutation length {len(self.perm)} != d_in {r + self.A_prime.shape[1]}"
            )

    @property
    def rank(self) -> int:
        return self.B_prime.shape[1]

    @property
    def d_in(self) -> int:
        return len(self.perm)

    @property
    def d_out(self) -> int:
        return self.B_prime.shape[0]

    @property
    def param_count(self) -> int:
        return self.B_prime.size + self.A_prime.size

    def dense(self) -> np.ndarray:
        """Reassemble the equivalent ``d_out x d_in`` matrix (testing aid)."""
        r = self.rank
        reduced = np.hstack([np.eye(r), self.A_prime])
        return self.perm.unapply((self.B_prime @ reduced).T).T


def svd(W, name: str = "W") -> SvdResult:
    """Thin SVD with singular values in non-increasing order."""
    W = as_matrix(W, name)
    try:
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge for matrix {name!r}: {exc}") from exc
    return SvdResult(U, s, Vt)


def truncated_svd(W, r: int, name: str = "W") -> LowRankPair:
    """Best rank-``r`` factorization ``W ~= B @ A``.

    The square roots of the retained singular values are split evenly
    between the two factors: ``B = U_r sqrt(S_r)``, ``A = sqrt(S_r) V_r^T``.
    """
    W = as_matrix(W, name)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(W.shape):
        raise DomainError(f"rank r={r} out of range [1, {min(W.shape)}] for {name!r}")
    res = svd(W, name)
    root = np.sqrt(res.singular_values[:r])
    B = res.U[:, :r] * root
    A = root[:, None] * res.Vt[:r]
    return LowRankPair(B, A)


def _pivoted_qr_order(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy column-pivoted Householder QR over the first ``r`` columns.

    Returns the column order and the absolute diagonal of R. Ties in the
    remaining column norms go to the lowest original column index.
    """
    r, n = A.shape
    work = A.copy()
    order = np.arange(n)
    diag = np.empty(r)
    for k in range(r):
        sub = work[k:, k:]
        norms = np.einsum("ij,ij->j", sub, sub)
        best = norms.max()
        tied = np.flatnonzero(norms == best)
        j = k + tied[np.argmin(order[k + tied])]
        if j != k:
            work[:, [k, j]] = work[:, [j, k]]
            order[[k, j]] = order[[j, k]]
        v = work[k:, k].copy()
        alpha = np.linalg.norm(v)
        diag[k] = alpha
        if alpha == 0.0:
            continue
        v[0] += np.copysign(alpha, v[0]) if v[0] != 0 else alpha
        vnorm2 = v @ v
        if vnorm2 > 0:
            work[k:, k:] -= np.outer(v, (2.0 / vnorm2) * (v @ work[k:, k:]))
    return order, diag


def _solve_block(A1: np.ndarray, A2: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu = sla.lu_factor(A1, check_finite=False)
        return sla.lu_solve(lu, A2, check_finite=False)


def strong_rrqr(A, f: float = DEFAULT_RRQR_F, *, max_swaps: int | None = None) -> Permutation:
    """Choose ``r`` columns of the ``r x d_in`` matrix ``A`` to lead.

    Starts from greedy column-pivoted QR, then repeatedly exchanges a
    leading column with a trailing one while some entry of
    ``inv(A1) @ A2`` exceeds ``f`` in magnitude. Each exchange pivots on
    the largest such entry, multiplying ``|det A1|`` by more than ``f``, so
    the loop terminates; on exit every entry of ``inv(A1) @ A2`` is
    bounded by ``f``.

    With as many rows as selected columns the trailing block ``R22`` of the
    factorization is empty, so the usual swap criterion reduces to the
    entries of ``inv(A1) @ A2`` alone.
    """
    A = as_matrix(A, "A")
    r, n = A.shape
    if n < r:
        raise DomainError(f"need at least as many columns as rows, got shape {A.shape}")
    if f < 1.0:
        raise DomainError(f"tolerance factor f must be >= 1, got {f}")

    order, diag = _pivoted_qr_order(A)
    if diag.max() == 0.0 or diag.min() < RANK_TOL * diag.max():
        raise RankDeficiencyError(
            f"matrix is numerically rank deficient below r={r}: smallest pivot "
            f"{diag.min():.3e} vs largest {diag.max():.3e}"
        )
    lead = order[:r].copy()
    trail = np.sort(order[r:])
    if trail.size == 0:
        return Permutation(lead)

    limit = f * (1.0 - 1e-10) if f > 1.0 + 1e-9 else f
    if max_swaps is None:
        max_swaps = 50 * n + 1000
    refresh_every = 32
    M = _solve_block(A[:, lead], A[:, trail])
    swaps = 0
    since_refresh = 0
    while True:
        absM = np.abs(M)
        flat = int(np.argmax(absM))
        i, j = divmod(flat, M.shape[1])
        if absM[i, j] <= limit:
            if since_refresh == 0:
                break
            M = _solve_block(A[:, lead], A[:, trail])
            since_refresh = 0
            continue
        if swaps >= max_swaps:
            raise NumericError(f"strong RRQR did not converge within {max_swaps} swaps")
        # Exchange lead[i] <-> trail[j]: a simplex-style pivot on M[i, j].
        m = M[:, j].copy()
        piv = m[i]
        row = M[i, :] / piv
        M -= np.outer(m, row)
        M[i, :] = row
        M[:, j] = -m / piv
        M[i, j] = 1.0 / piv
        lead[i], trail[j] = trail[j], lead[i]
        swaps += 1
        since_refresh += 1
        if since_refresh >= refresh_every:
            M = _solve_block(A[:, lead], A[:, trail])
            since_refresh = 0
    return Permutation(np.concatenate([lead, trail]))


def skip_transform(
    pair: LowRankPair, perm: Permutation | None = None, *, cond_limit: float = COND_LIMIT
) -> PermutedSkipFactors:
    """Fold the leading block of the permuted projection into ``B``.

    ``A' = inv(A1) @ A2`` comes from an LU solve, never an explicit
    inverse. Raises :class:`IllConditionedBlockError` when the 1-norm
    condition estimate of ``A1`` exceeds ``cond_limit``.
    """
    r, d_in = pair.A.shape
    if perm is None:
        perm = Permutation.identity(d_in)
    if len(perm) != d_in:
        raise DomainError(f"permutation length {len(perm)} != projection width {d_in}")
    At = perm.permute_columns(pair.A)
    A1, A2 = At[:, :r], At[:, r:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A1, check_finite=False)
    anorm = np.abs(A1).sum(axis=0).max()
    rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond > 0.0 or 1.0 / rcond > cond_limit:
        est = np.inf if not rcond > 0.0 else 1.0 / rcond
        raise IllConditionedBlockError(
            f"leading {r}x{r} block has condition estimate {est:.3e} > {cond_limit:.0e}; "
            "choose a column permutation (strong_rrqr) before block skipping"
        )
    A_prime = sla.lu_solve((lu, piv), A2, check_finite=False) if A2.size else A2.copy()
    return PermutedSkipFactors(pair.B @ A1, A_prime, perm)


def skip_code(
    A_prime: np.ndarray, perm: Permutation, x, arithmetic: Arithmetic | None = None
) -> np.ndarray:
    """Return ``x1 + A' x2`` where ``x~ = P.T x`` is split after row ``r``."""
    ar = arithmetic or Arithmetic("fp64")
    cols, was_vector = _as_columns(x, len(perm))
    r = A_prime.shape[0]
    xt = ar.store(perm.apply(cols), "input")
    z = xt[:r]
    if len(perm) > r:
        ap = ar.store(A_prime, "weight:A_prime")
        z = ar.add(z, ar.matmul(ap, xt[r:], "skip:A_prime"), "skip:add")
    return z[:, 0] if was_vector else z


def skip_project(
    factors: PermutedSkipFactors, x, arithmetic: Arithmetic | None = None
) -> np.ndarray:
    """The shared low-rank code ``x1 + A' x2`` of :func:`skip_forward`."""
    return skip_code(factors.A_prime, factors.perm, x, arithmetic)


def skip_forward(
    factors: PermutedSkipFactors, x, arithmetic: Arithmetic | None = None
) -> np.ndarray:
    """Evaluate ``B' (x1 + A' x2)``.

    Per input column this costs ``2r(d_in - r)`` for ``A' x2``, ``r`` for the
    addition (skipped when ``x2`` is empty) and ``2 r d_out`` for ``B'``.
    """
    ar = arithmetic or Arithmetic("fp64")
    cols, was_vector = _as_columns(x, factors.d_in)
    z = skip_project(factors, cols, ar)
    y = ar.matmul(ar.store(factors.B_prime, "weight:B_prime"), z, "skip:B_prime")
    return y[:, 0] if was_vector else y


def _checked_lu(A11: np.ndarray, cond_limit: float):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu = sla.lu_factor(A11, check_finite=False)
    anorm = np.abs(A11).sum(axis=0).max()
    rcond, _ = sla.lapack.dgecon(lu[0], anorm, norm="1")
    if not rcond > 0.0 or 1.0 / rcond > cond_limit:
        raise IllConditionedBlockError(
            f"leading {A11.shape[0]}x{A11.shape[0]} block is singular or ill-conditioned"
        )
    return lu


def schur_complement(A_full, r: int, *, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """``D = A22 - A21 inv(A11) A12`` for the split at row/column ``r``."""
    A_full = as_matrix(A_full, "A_full")
    n = A_full.shape[0]
    if A_full.shape != (n, n) or not 1 <= r <= n:
        raise DomainError(f"need square matrix and 1 <= r <= n, got {A_full.shape}, r={r}")
    lu = _checked_lu(A_full[:r, :r], cond_limit)
    return A_full[r:, r:] - A_full[r:, :r] @ sla.lu_solve(lu, A_full[:r, r:])


def schur_identity_check(A_full, r: int, *, cond_limit: float = COND_LIMIT) -> float:
    """Max-abs error of the block LDU reassembly built from the Schur complement.

    ``A = [[I, 0], [A21 inv(A11), I]] @ diag(A11, D) @ [[I, inv(A11) A12], [0, I]]``
    """
    A_full = as_matrix(A_full, "A_full")
    n = A_full.shape[0]
    if A_full.shape != (n, n) or not 1 <= r <= n:
        raise DomainError(f"need square matrix and 1 <= r <= n, got {A_full.shape}, r={r}")
    A11, A12 = A_full[:r, :r], A_full[:r, r:]
    A21, A22 = A_full[r:, :r], A_full[r:, r:]
    lu = _checked_lu(A11, cond_limit)
    upper = sla.lu_solve(lu, A12)
    lower = sla.lu_solve(lu, A21.T, trans=1).T
    D = A22 - A21 @ upper
    k = n - r
    L = np.block([[np.eye(r), np.zeros((r, k))], [lower, np.eye(k)]])
    mid = np.block([[A11, np.zeros((r, k))], [np.zeros((k, r)), D]])
    U = np.block([[np.eye(r), upper], [np.zeros((k, r)), np.eye(k)]])
    return float(np.abs(A_full - L @ mid @ U).max())
