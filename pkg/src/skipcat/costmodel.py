"""Closed-form parameter and FLOP accounting for one group of projections.

A group is ``C`` weight matrices that read the same input (``C = 1`` for a
lone matrix). All figures are group totals for a single input token, with
one multiply-add counted as two FLOPs.

==========  ===============================  =====================================
method      parameters                       FLOPs
==========  ===============================  =====================================
dense       C d_in d_out                     2 C d_in d_out
naive       C r (d_in + d_out)               2 C r (d_in + d_out)
cat         r (d_in + C d_out)               2 r (d_in + C d_out)
skip        C r (d_in + d_out - r)           C (2 r (d_in + d_out - r) + r)
skipcat     r (d_in + C d_out - r)           2 r (d_in + C d_out - r) + r
==========  ===============================  =====================================

The ``+ r`` term of the skip variants is the vector addition ``x1 + A' x2``;
at ``r = d_in`` there is no ``x2`` and the term is dropped. Applying the
permutation is an index gather and costs nothing.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, replace

from .errors import DomainError

__all__ = [
    "METHODS",
    "CostReport",
    "cost",
    "group_cost",
    "max_rank",
    "dense_params",
    "breakeven_rank",
    "cost_curve",
    "curve_csv",
]

METHODS = ("dense", "naive", "cat", "skip", "skipcat")
LOWRANK_METHODS = ("naive", "cat", "skip", "skipcat")
INDEX_BYTES = 4


@dataclass(frozen=True)
class CostReport:
    method: str
    d_in: int
    d_out: int
    C: int
    r: int
    flops_per_token: int
    params: int
    perm_overhead_bytes: int = 0

    @property
    def bytes_fp16(self) -> int:
        return 2 * self.params

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "C": self.C,
            "r": self.r,
            "flops_per_token": self.flops_per_token,
            "params": self.params,
            "bytes_fp16": self.bytes_fp16,
            "perm_overhead_bytes": self.perm_overhead_bytes,
        }


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}; expected one of {METHODS}")


def max_rank(method: str, d_in: int, d_outs: Sequence[int]) -> int:
    """Largest admissible rank for ``method`` on a group with outputs ``d_outs``."""
    _check_method(method)
    if method in ("cat", "skipcat"):
        return min(sum(d_outs), d_in)
    return min(min(d_outs), d_in)


def dense_params(d_in: int, d_outs: Sequence[int]) -> int:
    return d_in * sum(d_outs)


def group_cost(method: str, d_in: int, d_outs: Sequence[int], r: int = 0) -> tuple[int, int]:
    """Return ``(params, flops)`` for a group whose members may differ in d_out."""
    _check_method(method)
    d_outs = [int(d) for d in d_outs]
    if d_in < 1 or not d_outs or min(d_outs) < 1:
        raise DomainError("dimensions must be positive and the group non-empty")
    if method == "dense":
        p = dense_params(d_in, d_outs)
        return p, 2 * p
    top = max_rank(method, d_in, d_outs)
    if not 1 <= r <= top:
        raise DomainError(f"rank r={r} out of range [1, {top}] for method {method!r}")
    add = r if d_in > r else 0
    if method == "naive":
        p = sum(r * (d_in + d) for d in d_outs)
        return p, 2 * p
    if method == "cat":
        p = r * (d_in + sum(d_outs))
        return p, 2 * p
    if method == "skip":
        p = sum(r * (d_in + d - r) for d in d_outs)
        return p, 2 * p + len(d_outs) * add
    p = r * (d_in + sum(d_outs) - r)
    return p, 2 * p + add


def cost(method: str, d_in: int, d_out: int, C: int = 1, r: int = 0) -> CostReport:
    """Cost of a group of ``C`` equally shaped ``d_out x d_in`` matrices at rank ``r``."""
    if C < 1:
        raise DomainError(f"concat count C must be >= 1, got {C}")
    params, flops = group_cost(method, d_in, [d_out] * C, r)
    if method in ("skip", "skipcat"):
        n_perm = C if method == "skip" else 1
        overhead = n_perm * d_in * INDEX_BYTES
    else:
        overhead = 0
    return CostReport(method, d_in, d_out, C, 0 if method == "dense" else r, flops, params, overhead)


def breakeven_rank(d_in: int, d_out: int) -> int:
    """Largest integer ``r`` with ``r < d_in d_out / (d_in + d_out)``."""
    if d_in < 1 or d_out < 1:
        raise DomainError("dimensions must be positive")
    return (d_in * d_out - 1) // (d_in + d_out)


def cost_curve(d_in: int, d_out: int, C: int, method: str, r_step: int = 1) -> list[CostReport]:
    """Sample :func:`cost` at ``r = r_step, 2 r_step, ...`` up to the maximum rank."""
    if r_step < 1:
        raise DomainError(f"r_step must be >= 1, got {r_step}")
    _check_method(method)
    if method == "dense":
        top = max_rank("naive", d_in, [d_out] * C)
        flat = cost("dense", d_in, d_out, C)
        return [replace(flat, r=r) for r in range(r_step, top + 1, r_step)]
    top = max_rank(method, d_in, [d_out] * C)
    return [cost(method, d_in, d_out, C, r) for r in range(r_step, top + 1, r_step)]


def curve_csv(reports: Sequence[CostReport]) -> str:
    """Render a curve as CSV text: ``r,flops,params,bytes_fp16`` with LF endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["r", "flops", "params", "bytes_fp16"])
    for rep in reports:
        writer.writerow([rep.r, rep.flops_per_token, rep.params, rep.bytes_fp16])
    return buf.getvalue()
