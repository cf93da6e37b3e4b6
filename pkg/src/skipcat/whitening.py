"""Calibration-driven whitening of weights before truncation.

The calibration statistic is the raw (uncentered) Gram matrix
``S = sum x x^T`` of layer inputs. With ``L L^T = S + damping I`` the
factorization is computed on ``W L`` and the projection is mapped back
through ``L^-1``, so that truncation error is measured as ``||(W - BA) L||_F``,
i.e. weighted by how the layer is actually driven.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, FactorizationError
from .linalg import LowRankPair, as_matrix, truncated_svd

__all__ = [
    "GramMatrix",
    "WhiteningFactor",
    "accumulate_gram",
    "default_damping",
    "whitening_factor",
    "whiten_then_fold",
]

DAMPING_SCALE = 1e-6


@dataclass(frozen=True)
class GramMatrix:
    S: np.ndarray
    sample_count: int = 0

    @classmethod
    def empty(cls, d_in: int) -> "GramMatrix":
        return cls(np.zeros((d_in, d_in)), 0)

    @property
    def d_in(self) -> int:
        return self.S.shape[0]

    def merge(self, other: "GramMatrix") -> "GramMatrix":
        """Combine two shards accumulated independently."""
        if other.d_in != self.d_in:
            raise DomainError(f"cannot merge Gram matrices of size {self.d_in} and {other.d_in}")
        return GramMatrix(self.S + other.S, self.sample_count + other.sample_count)


@dataclass(frozen=True)
class WhiteningFactor:
    L: np.ndarray
    damping: float = 0.0


def accumulate_gram(samples, existing: GramMatrix | None = None) -> GramMatrix:
    """Add ``X X^T`` to ``existing`` for a ``d_in x n`` block of sample columns.

    ``samples`` may also be an iterable of such blocks (or of 1-D vectors).
    """
    if isinstance(samples, np.ndarray) or not isinstance(samples, Iterable):
        blocks = [samples]
    else:
        blocks = list(samples)
    gram = existing
    for block in blocks:
        X = np.asarray(block, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        X = as_matrix(X, "calibration samples")
        if gram is None:
            gram = GramMatrix.empty(X.shape[0])
        if X.shape[0] != gram.d_in:
            raise DomainError(
                f"calibration sample has {X.shape[0]} rows, expected d_in={gram.d_in}"
            )
        S = gram.S + X @ X.T
        gram = GramMatrix(0.5 * (S + S.T), gram.sample_count + X.shape[1])
    if gram is None:
        raise DomainError("no calibration samples and no existing Gram matrix")
    return gram


def default_damping(gram: GramMatrix) -> float:
    return DAMPING_SCALE * float(np.trace(gram.S)) / gram.d_in


def whitening_factor(gram: GramMatrix, damping: float | None = None) -> WhiteningFactor:
    """Lower Cholesky factor of ``S + damping I``.

    ``damping=None`` uses ``1e-6 * trace(S) / d_in``.
    """
    if damping is None:
        damping = default_damping(gram)
    if damping < 0:
        raise DomainError(f"damping must be non-negative, got {damping}")
    M = gram.S + damping * np.eye(gram.d_in)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"S + {damping:g} I is not positive definite; increase the damping"
        ) from exc
    if not np.all(np.diag(L) > 0):
        raise FactorizationError(
            f"whitening factor is singular at damping {damping:g}; increase the damping"
        )
    return WhiteningFactor(L, float(damping))


def whiten_then_fold(
    W,
    factor: WhiteningFactor,
    decompose: Callable[[np.ndarray], LowRankPair] | int,
) -> LowRankPair:
    """Factor ``W L`` and return ``(B, A_w L^-1)``.

    ``decompose`` maps a matrix to a :class:`LowRankPair`; an integer is
    shorthand for truncated SVD at that rank.
    """
    W = as_matrix(W, "W")
    L = factor.L
    if W.shape[1] != L.shape[0]:
        raise DomainError(f"W has {W.shape[1]} columns but whitening factor is {L.shape[0]}")
    if isinstance(decompose, (int, np.integer)):
        rank = int(decompose)
        decompose = lambda M: truncated_svd(M, rank)  # noqa: E731
    pair = decompose(W @ L)
    # A L = A_w  <=>  L^T A^T = A_w^T
    A = sla.solve_triangular(L, pair.A.T, trans="T", lower=True).T
    return LowRankPair(pair.B, A)
