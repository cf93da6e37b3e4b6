"""Layer compression: naive, Cat (shared projection), Skip and SkipCat.

Weights that read the same input form a :class:`SharedGroup`. Under ``cat``
and ``skipcat`` a group is stacked along the output dimension and factored
once, so its members share one projection; ``B`` is then sliced back into
per-member reconstruction matrices. Under ``skip`` and ``skipcat`` every
projection is additionally rewritten with block skipping after a strong RRQR
column permutation.

The rank is uniform across the groups of a layer and is the largest one
whose total storage fits the requested budget.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .costmodel import LOWRANK_METHODS, dense_params, group_cost, max_rank
from .errors import DomainError, IllConditionedBlockError, RankDeficiencyError
from .linalg import (
    DEFAULT_RRQR_F,
    LowRankPair,
    Permutation,
    as_matrix,
    skip_code,
    skip_transform,
    strong_rrqr,
    truncated_svd,
)
from .precision import Arithmetic
from .whitening import GramMatrix, whiten_then_fold, whitening_factor

__all__ = [
    "LAYER_GROUPS",
    "SharedGroup",
    "CompressionConfig",
    "CompressedBlock",
    "CompressedGroup",
    "CompressedLayer",
    "concat_group",
    "cat_decompose",
    "rank_for_rate",
    "layer_rank_for_rate",
    "compress_group",
    "compress_layer",
    "groups_from_weights",
    "thread_count",
]

log = logging.getLogger(__name__)

# Core projections of one transformer layer, grouped by shared input.
LAYER_GROUPS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("qkv", ("q", "k", "v")),
    ("o", ("o",)),
    ("gate_up", ("gate", "up")),
    ("down", ("down",)),
)

SHARED_METHODS = ("cat", "skipcat")
SKIP_METHODS = ("skip", "skipcat")


@dataclass(frozen=True)
class SharedGroup:
    name: str
    names: tuple[str, ...]
    weights: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        weights = tuple(as_matrix(w, n) for n, w in zip(names, self.weights))
        if not names or len(names) != len(weights):
            raise DomainError(f"group {self.name!r} needs one name per weight matrix")
        widths = {w.shape[1] for w in weights}
        if len(widths) != 1:
            raise DomainError(
                f"group {self.name!r} members disagree on d_in: "
                + ", ".join(f"{n}:{w.shape[1]}" for n, w in zip(names, weights))
            )
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "weights", weights)

    @property
    def concat_count(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_outs(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights)

    def dense_params(self) -> int:
        return dense_params(self.d_in, self.d_outs)


@dataclass(frozen=True)
class CompressionConfig:
    method: str
    target_rate: float | None = None
    rank: int | None = None
    rrqr_f: float = DEFAULT_RRQR_F
    whitening: bool = False
    damping: float | None = None
    rank_multiple: int = 8

    def __post_init__(self) -> None:
        if self.method not in LOWRANK_METHODS:
            raise DomainError(f"method must be one of {LOWRANK_METHODS}, got {self.method!r}")
        if (self.target_rate is None) == (self.rank is None):
            raise DomainError("set exactly one of target_rate and rank")
        if self.target_rate is not None and not 0.0 <= self.target_rate < 1.0:
            raise DomainError(f"target_rate must lie in [0, 1), got {self.target_rate}")
        if self.rank is not None and self.rank < 1:
            raise DomainError(f"rank must be positive, got {self.rank}")
        if self.rrqr_f < 1.0:
            raise DomainError(f"rrqr_f must be >= 1, got {self.rrqr_f}")
        if self.rank_multiple < 1:
            raise DomainError(f"rank_multiple must be >= 1, got {self.rank_multiple}")


@dataclass(frozen=True)
class CompressedBlock:
    """One shared projection and the reconstruction slices that read it.

    Without skipping ``projection`` is ``A`` (r x d_in). With skipping it is
    ``A'`` (r x (d_in - r)), ``perm`` is set and the slices hold rows of ``B'``.
    """

    members: tuple[str, ...]
    slices: tuple[np.ndarray, ...]
    projection: np.ndarray
    perm: Permutation | None = None
    residual_fro: tuple[float, ...] = ()

    @property
    def skipped(self) -> bool:
        return self.perm is not None

    @property
    def rank(self) -> int:
        return self.projection.shape[0]

    @property
    def d_in(self) -> int:
        return len(self.perm) if self.skipped else self.projection.shape[1]

    @property
    def d_outs(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.slices)

    @property
    def param_count(self) -> int:
        return self.projection.size + sum(s.size for s in self.slices)

    @property
    def cost_method(self) -> str:
        return "skipcat" if self.skipped else "cat"

    def cost(self) -> tuple[int, int]:
        """``(params, flops)`` of this block from the closed-form model."""
        return group_cost(self.cost_method, self.d_in, self.d_outs, self.rank)

    def effective_projection(self) -> np.ndarray:
        """The ``r x d_in`` matrix this block's code is a linear image of."""
        if not self.skipped:
            return self.projection
        reduced = np.hstack([np.eye(self.rank), self.projection])
        return self.perm.unapply(reduced.T).T

    def reconstruct(self) -> dict[str, np.ndarray]:
        proj = self.effective_projection()
        return {m: s @ proj for m, s in zip(self.members, self.slices)}

    def code(self, x: np.ndarray, arithmetic: Arithmetic) -> np.ndarray:
        if self.skipped:
            return skip_code(self.projection, self.perm, x, arithmetic)
        a = arithmetic.store(self.projection, "weight:A")
        return arithmetic.matmul(a, arithmetic.store(x, "input"), "lowrank:A")

    def forward(self, x: np.ndarray, arithmetic: Arithmetic | None = None) -> dict[str, np.ndarray]:
        """Evaluate the shared code once, then every member's reconstruction."""
        ar = arithmetic or Arithmetic("fp64")
        z = self.code(x, ar)
        return {
            m: ar.matmul(ar.store(s, f"weight:{m}"), z, f"reconstruct:{m}")
            for m, s in zip(self.members, self.slices)
        }


@dataclass(frozen=True)
class CompressedGroup:
    name: str
    method: str
    rank: int
    blocks: tuple[CompressedBlock, ...]
    d_in: int
    d_outs: tuple[int, ...]
    fallback: bool = False
    notes: tuple[str, ...] = ()

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(m for b in self.blocks for m in b.members)

    @property
    def param_count(self) -> int:
        return sum(b.param_count for b in self.blocks)

    @property
    def dense_params(self) -> int:
        return dense_params(self.d_in, self.d_outs)

    def cost(self) -> tuple[int, int]:
        params = flops = 0
        for b in self.blocks:
            p, f = b.cost()
            params += p
            flops += f
        return params, flops

    @property
    def achieved_rate(self) -> float:
        return 1.0 - self.param_count / self.dense_params

    def forward(self, x: np.ndarray, arithmetic: Arithmetic | None = None) -> dict[str, np.ndarray]:
        ar = arithmetic or Arithmetic("fp64")
        out: dict[str, np.ndarray] = {}
        for b in self.blocks:
            out.update(b.forward(x, ar))
        return out


@dataclass(frozen=True)
class CompressedLayer:
    method: str
    rank: int
    groups: dict[str, CompressedGroup]
    target_rate: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def stored_params(self) -> int:
        return sum(g.param_count for g in self.groups.values())

    @property
    def dense_params(self) -> int:
        return sum(g.dense_params for g in self.groups.values())

    @property
    def achieved_rate(self) -> float:
        return 1.0 - self.stored_params / self.dense_params

    @property
    def fallbacks(self) -> list[str]:
        return [n for n, g in self.groups.items() if g.fallback]

    def cost_report(self) -> dict:
        groups = {}
        flops = 0
        for name, g in self.groups.items():
            p, f = g.cost()
            flops += f
            groups[name] = {"params": p, "flops_per_token": f, "rank": g.rank}
        return {
            "method": self.method,
            "rank": self.rank,
            "params": self.stored_params,
            "dense_params": self.dense_params,
            "flops_per_token": flops,
            "dense_flops_per_token": 2 * self.dense_params,
            "bytes_fp16": 2 * self.stored_params,
            "achieved_rate": self.achieved_rate,
            "groups": groups,
        }

    def group_of(self, member: str) -> CompressedGroup:
        for g in self.groups.values():
            if member in g.members:
                return g
        raise KeyError(member)


def concat_group(group: SharedGroup) -> np.ndarray:
    """Stack the members along the output dimension, in member order."""
    if group.concat_count == 1:
        return group.weights[0]
    return np.vstack(group.weights)


def _slice_rows(B: np.ndarray, d_outs: Sequence[int]) -> tuple[np.ndarray, ...]:
    bounds = np.cumsum([0, *d_outs])
    return tuple(B[bounds[i] : bounds[i + 1]] for i in range(len(d_outs)))


def cat_decompose(group: SharedGroup, r: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Shared projection ``A`` and per-member slices of ``B`` for the stacked group."""
    pair = truncated_svd(concat_group(group), r, name=group.name)
    return pair.A, _slice_rows(pair.B, group.d_outs)


def _largest_rank(params_at, top: int, budget: float) -> int:
    """Largest r in [0, top] with params_at(r) <= budget; params_at is nondecreasing."""
    lo, hi = 0, top
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if params_at(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def rank_for_rate(d_in: int, d_out: int, C: int, method: str, rate: float) -> int:
    """Largest rank whose group storage is at most ``(1 - rate) C d_in d_out``.

    The linear formulas (naive, cat) are inverted by division and the
    quadratic ones (skip, skipcat) by taking the smaller root; the result is
    then nudged by back-substitution so rounding can never overshoot.
    Small rates clamp to the maximum rank; callers report the achieved rate
    from actual storage.
    """
    if method not in LOWRANK_METHODS:
        raise DomainError(f"method must be one of {LOWRANK_METHODS}, got {method!r}")
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"rate must lie in [0, 1), got {rate}")
    if min(d_in, d_out, C) < 1:
        raise DomainError("dimensions and C must be positive")
    budget = (1.0 - rate) * C * d_in * d_out
    d_outs = [d_out] * C
    top = max_rank(method, d_in, d_outs)

    if method == "naive":
        r = math.floor(budget / (C * (d_in + d_out)))
    elif method == "cat":
        r = math.floor(budget / (d_in + C * d_out))
    else:
        # r (s - r) <= b  with  s = d_in + d_out (per member) or d_in + C d_out
        s = d_in + d_out if method == "skip" else d_in + C * d_out
        b = budget / C if method == "skip" else budget
        disc = (s / 2.0) ** 2 - b
        r = top if disc < 0 else math.floor(s / 2.0 - math.sqrt(disc))
    r = max(0, min(r, top))

    def params(k: int) -> int:
        return group_cost(method, d_in, d_outs, k)[0]

    while r > 0 and params(r) > budget:
        r -= 1
    while r < top and params(r + 1) <= budget:
        r += 1
    if r < 1:
        raise DomainError(f"rate {rate} leaves no room for even a rank-1 {method} factorization")
    return int(r)


def layer_rank_for_rate(
    shapes: Sequence[tuple[int, Sequence[int]]],
    method: str,
    rate: float,
    rank_multiple: int = 1,
) -> int:
    """Uniform rank for several groups ``(d_in, d_outs)`` under one layer budget.

    Each group uses ``min(r, its max rank)``. The result is floored to a
    multiple of ``rank_multiple`` when that leaves a positive rank.
    """
    if method not in LOWRANK_METHODS:
        raise DomainError(f"method must be one of {LOWRANK_METHODS}, got {method!r}")
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"rate must lie in [0, 1), got {rate}")
    tops = [max_rank(method, d_in, d_outs) for d_in, d_outs in shapes]
    budget = (1.0 - rate) * sum(dense_params(d_in, d_outs) for d_in, d_outs in shapes)

    def params(r: int) -> int:
        return sum(
            group_cost(method, d_in, d_outs, min(r, top))[0] if r else 0
            for (d_in, d_outs), top in zip(shapes, tops)
        )

    r = _largest_rank(params, max(tops), budget)
    if r < 1:
        raise DomainError(f"rate {rate} leaves no room for even a rank-1 {method} factorization")
    if r >= rank_multiple:
        r -= r % rank_multiple
    return r


def _decompose(W: np.ndarray, r: int, factor, name: str) -> LowRankPair:
    if factor is None:
        return truncated_svd(W, r, name=name)
    return whiten_then_fold(W, factor, lambda M: truncated_svd(M, r, name=name))


def _plain_block(members, d_outs, pair: LowRankPair, weights) -> CompressedBlock:
    slices = _slice_rows(pair.B, d_outs)
    return CompressedBlock(
        members=tuple(members),
        slices=slices,
        projection=pair.A,
        residual_fro=tuple(float(np.linalg.norm(w - s @ pair.A)) for w, s in zip(weights, slices)),
    )


def _fallback_rank(d_in: int, d_outs: Sequence[int], r: int) -> int:
    """Largest plain rank storing no more than the skip factors would have."""
    skip_params = r * (d_in + sum(d_outs) - r)
    return max(1, skip_params // (d_in + sum(d_outs)))


def compress_group(
    group: SharedGroup,
    method: str,
    r: int,
    *,
    rrqr_f: float = DEFAULT_RRQR_F,
    gram: GramMatrix | None = None,
    damping: float | None = None,
) -> CompressedGroup:
    """Compress one group at (at most) rank ``r``.

    If block skipping is refused for a projection (rank-deficient or
    ill-conditioned leading block) that projection is stored without
    skipping at the largest rank that fits the same storage, and the group
    is flagged.
    """
    if method not in LOWRANK_METHODS:
        raise DomainError(f"method must be one of {LOWRANK_METHODS}, got {method!r}")
    r = min(r, max_rank(method, group.d_in, group.d_outs))
    factor = whitening_factor(gram, damping) if gram is not None else None
    if method in SHARED_METHODS:
        units = [(group.names, group.d_outs, concat_group(group), group.weights)]
    else:
        units = [((n,), (w.shape[0],), w, (w,)) for n, w in zip(group.names, group.weights)]

    blocks = []
    notes = []
    for members, d_outs, W, weights in units:
        label = f"{group.name}:{'+'.join(members)}"
        pair = _decompose(W, r, factor, label)
        if method not in SKIP_METHODS:
            blocks.append(_plain_block(members, d_outs, pair, weights))
            continue
        try:
            perm = strong_rrqr(pair.A, rrqr_f)
            sk = skip_transform(pair, perm)
        except (IllConditionedBlockError, RankDeficiencyError) as exc:
            r_fb = _fallback_rank(group.d_in, d_outs, pair.rank)
            notes.append(f"{label}: block skipping refused ({exc}); stored unskipped at rank {r_fb}")
            log.warning("%s", notes[-1])
            trimmed = LowRankPair(pair.B[:, :r_fb], pair.A[:r_fb])
            blocks.append(_plain_block(members, d_outs, trimmed, weights))
            continue
        slices = _slice_rows(sk.B_prime, d_outs)
        block = CompressedBlock(tuple(members), slices, sk.A_prime, perm)
        recon = block.reconstruct()
        blocks.append(
            CompressedBlock(
                block.members,
                block.slices,
                block.projection,
                block.perm,
                tuple(float(np.linalg.norm(w - recon[m])) for m, w in zip(members, weights)),
            )
        )
    return CompressedGroup(
        name=group.name,
        method=method,
        rank=r,
        blocks=tuple(blocks),
        d_in=group.d_in,
        d_outs=group.d_outs,
        fallback=bool(notes),
        notes=tuple(notes),
    )


def thread_count() -> int:
    """Worker cap from ``SKIPCAT_THREADS`` (default: available CPUs)."""
    raw = os.environ.get("SKIPCAT_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise DomainError(f"SKIPCAT_THREADS must be a positive integer, got {raw!r}")
    return n


def compress_layer(
    groups: Sequence[SharedGroup],
    config: CompressionConfig,
    calib: Mapping[str, GramMatrix] | None = None,
    *,
    max_workers: int | None = None,
) -> CompressedLayer:
    """Compress every group of a layer under one uniform rank.

    ``calib`` maps group names to Gram matrices and must be given exactly
    when ``config.whitening`` is on; members of a group share one Gram since
    they share one input.
    """
    if not groups:
        raise DomainError("no groups to compress")
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise DomainError(f"duplicate group names: {names}")
    if config.whitening and calib is None:
        raise DomainError("whitening is on but no calibration statistics were given")
    if not config.whitening and calib is not None:
        raise DomainError("calibration statistics given but whitening is off")
    if config.whitening:
        missing = [n for n in names if n not in calib]
        if missing:
            raise DomainError(f"missing calibration statistics for groups {missing}")

    if config.rank is not None:
        r = config.rank
    else:
        shapes = [(g.d_in, g.d_outs) for g in groups]
        r = layer_rank_for_rate(shapes, config.method, config.target_rate, config.rank_multiple)

    def work(g: SharedGroup) -> CompressedGroup:
        return compress_group(
            g,
            config.method,
            r,
            rrqr_f=config.rrqr_f,
            gram=calib[g.name] if config.whitening else None,
            damping=config.damping,
        )

    workers = max_workers or thread_count()
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(groups))) as pool:
            done = list(pool.map(work, groups))
    else:
        done = [work(g) for g in groups]
    ordered = dict(sorted(((g.name, g) for g in done), key=lambda kv: kv[0]))
    return CompressedLayer(config.method, r, ordered, config.target_rate)


def groups_from_weights(weights: Mapping[str, np.ndarray]) -> list[SharedGroup]:
    """Build the standard layer groups from whichever core projections are present."""
    groups = []
    for gname, members in LAYER_GROUPS:
        present = [m for m in members if m in weights]
        if present:
            groups.append(SharedGroup(gname, tuple(present), tuple(weights[m] for m in present)))
    unknown = sorted(set(weights) - {m for _, ms in LAYER_GROUPS for m in ms})
    if unknown:
        raise DomainError(f"unrecognised weight names {unknown}; expected q,k,v,o,gate,up,down")
    return groups
