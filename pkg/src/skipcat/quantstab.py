"""8-bit quantization of low-rank factors, with outlier-spreading rewrites.

Two exact rewrites of the pair ``(B, A)`` are offered before quantizing:

* a Hadamard rotation ``(B H, H^T A)``, which spreads a dominant channel's
  energy across all ``r`` channels;
* per-channel scaling ``(B diag(s), diag(s)^-1 A)`` that equalizes the
  max-magnitude of each column of ``B`` with the matching row of ``A``.

Both leave ``B @ A`` unchanged. Quantization is symmetric per-row
round-to-nearest into ``[-127, 127]``.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.linalg import block_diag, hadamard

from .errors import DomainError
from .linalg import LowRankPair, as_matrix

__all__ = [
    "QuantizedMatrix",
    "STABILIZERS",
    "hadamard_matrix",
    "insert_hadamard",
    "channel_scale",
    "quantize_rtn",
    "dequantize",
    "stabilize",
    "quant_error",
    "stabilized_quant_report",
    "outlier_pair",
]

QMAX = 127
STABILIZERS = ("hadamard", "scaling")


@dataclass(frozen=True)
class QuantizedMatrix:
    q: np.ndarray
    scale: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape


def hadamard_matrix(r: int) -> np.ndarray:
    """Orthonormal ``r x r`` rotation.

    For a power of two this is the Walsh-Hadamard matrix scaled by
    ``1/sqrt(r)``; otherwise the largest power-of-two leading block is
    rotated and the remainder left as identity.
    """
    if r < 1:
        raise DomainError(f"rank must be positive, got {r}")
    p = 1 << (r.bit_length() - 1)
    H = hadamard(p).astype(np.float64) / np.sqrt(p)
    if p == r:
        return H
    return block_diag(H, np.eye(r - p))


def insert_hadamard(B, A) -> tuple[np.ndarray, np.ndarray]:
    B = as_matrix(B, "B")
    A = as_matrix(A, "A")
    if B.shape[1] != A.shape[0]:
        raise DomainError(f"incompatible factor shapes B{B.shape} and A{A.shape}")
    H = hadamard_matrix(B.shape[1])
    return B @ H, H.T @ A


def channel_scale(B, A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(B diag(s), diag(s)^-1 A, s)`` with ``s_i = sqrt(max|A_i.| / max|B_.i|)``.

    A channel whose column or row is entirely zero keeps ``s_i = 1``.
    """
    B = as_matrix(B, "B")
    A = as_matrix(A, "A")
    if B.shape[1] != A.shape[0]:
        raise DomainError(f"incompatible factor shapes B{B.shape} and A{A.shape}")
    b_max = np.abs(B).max(axis=0)
    a_max = np.abs(A).max(axis=1)
    s = np.ones_like(b_max)
    live = (b_max > 0) & (a_max > 0)
    s[live] = np.sqrt(a_max[live] / b_max[live])
    return B * s, A / s[:, None], s


def quantize_rtn(M) -> QuantizedMatrix:
    """Symmetric per-row int8 quantization, rounding half to even."""
    M = as_matrix(M, "M")
    row_max = np.abs(M).max(axis=1)
    scale = np.where(row_max > 0, row_max / QMAX, 1.0)
    q = np.clip(np.rint(M / scale[:, None]), -QMAX, QMAX).astype(np.int8)
    return QuantizedMatrix(q, scale)


def dequantize(qm: QuantizedMatrix) -> np.ndarray:
    return qm.q.astype(np.float64) * qm.scale[:, None]


def stabilize(B, A, pipeline: Iterable[str] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Apply the chosen rewrites, rotation first."""
    steps = set(pipeline)
    unknown = steps - set(STABILIZERS)
    if unknown:
        raise DomainError(f"unknown stabilizers {sorted(unknown)}; expected {STABILIZERS}")
    B = as_matrix(B, "B")
    A = as_matrix(A, "A")
    if "hadamard" in steps:
        B, A = insert_hadamard(B, A)
    if "scaling" in steps:
        B, A, _ = channel_scale(B, A)
    return B, A


def quant_error(B, A, pipeline: Iterable[str] = ()) -> float:
    """``||BA - deq(Bq) deq(Aq)||_F / ||BA||_F`` after stabilizing and quantizing."""
    ref = np.asarray(B, dtype=np.float64) @ np.asarray(A, dtype=np.float64)
    Bs, As = stabilize(B, A, pipeline)
    approx = dequantize(quantize_rtn(Bs)) @ dequantize(quantize_rtn(As))
    return float(np.linalg.norm(ref - approx) / np.linalg.norm(ref))


def stabilized_quant_report(pair: LowRankPair, pipelines=None) -> dict[str, float]:
    """Relative quantization error for every subset of stabilizers.

    Keys are ``"none"``, ``"hadamard"``, ``"scaling"`` and ``"hadamard+scaling"``.
    """
    if pipelines is None:
        pipelines = [c for k in range(len(STABILIZERS) + 1) for c in combinations(STABILIZERS, k)]
    return {
        "+".join(p) if p else "none": quant_error(pair.B, pair.A, p)
        for p in pipelines
    }


def outlier_pair(
    seed: int,
    d_out: int = 64,
    r: int = 16,
    d_in: int = 64,
    n_outliers: int = 2,
    b_gain: float = 50.0,
    a_gain: float = 30.0,
) -> LowRankPair:
    """Gaussian factors with a few outlier channels in the rank dimension.

    The chosen channels are boosted in both their ``B`` column and ``A`` row,
    the pattern block skipping tends to leave behind.
    """
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d_out, r))
    A = rng.standard_normal((r, d_in))
    ch = rng.choice(r, size=min(n_outliers, r), replace=False)
    B[:, ch] *= b_gain
    A[ch] *= a_gain
    return LowRankPair(B, A)
