"""Emulated low-precision arithmetic and FLOP accounting.

Every value lives in a float64 array, but after each matrix multiply and
each elementwise add the result is rounded to the target format. Products
are accumulated wide (in float64) before that rounding, which is how GEMM
kernels with fp32 accumulators behave in practice.

Overflow is detected on the wide value: in fp16 mode any magnitude above
65504 is recorded and replaced by a signed infinity.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import ml_dtypes
import numpy as np

__all__ = [
    "MODES",
    "FP16_MAX",
    "FlopCounter",
    "OverflowEvent",
    "PrecisionTrace",
    "Arithmetic",
    "round_to",
]

FP16_MAX = 65504.0

MODES = ("fp64", "fp32", "fp16", "bf16")

_FORMAT_MAX = {
    "fp64": float(np.finfo(np.float64).max),
    "fp32": float(np.finfo(np.float32).max),
    "fp16": FP16_MAX,
    "bf16": float(ml_dtypes.finfo(ml_dtypes.bfloat16).max),
}


def round_to(values: np.ndarray, mode: str) -> np.ndarray:
    """Round ``values`` to ``mode`` and return them widened back to float64.

    Magnitudes above the format maximum become signed infinities (no
    saturation), so downstream arithmetic sees the overflow.
    """
    if mode not in _FORMAT_MAX:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {MODES}")
    values = np.asarray(values, dtype=np.float64)
    if mode == "fp64":
        return values.copy()
    limit = _FORMAT_MAX[mode]
    over = np.abs(values) > limit
    with np.errstate(over="ignore", invalid="ignore"):
        if mode == "fp32":
            out = values.astype(np.float32).astype(np.float64)
        elif mode == "fp16":
            out = values.astype(np.float16).astype(np.float64)
        else:
            out = values.astype(ml_dtypes.bfloat16).astype(np.float64)
    if over.any():
        out[over] = np.copysign(np.inf, values[over])
    return out


class FlopCounter:
    """Tallies floating-point operations by call site.

    One multiply-add counts as two FLOPs; an elementwise add counts one.
    """

    def __init__(self) -> None:
        self.by_site: dict[str, int] = defaultdict(int)

    def add(self, flops: int, site: str = "") -> None:
        self.by_site[site] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_site.values())

    def reset(self) -> None:
        self.by_site.clear()


@dataclass(frozen=True)
class OverflowEvent:
    site: str
    magnitude: float
    count: int = 1


@dataclass
class PrecisionTrace:
    mode: str
    overflow_events: list[OverflowEvent] = field(default_factory=list)
    max_abs_intermediate: float = 0.0

    @property
    def overflowed(self) -> bool:
        return bool(self.overflow_events)

    def summary(self) -> str:
        sites = sorted({e.site for e in self.overflow_events})
        return (
            f"mode={self.mode} overflow_events={len(self.overflow_events)} "
            f"max_abs_intermediate={self.max_abs_intermediate:.6g}"
            + (f" sites={','.join(sites)}" if sites else "")
        )


def _magnitude(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    mags = np.abs(values)
    if np.isnan(mags).any():
        return float("inf")
    return float(mags.max())


class Arithmetic:
    """Rounding arithmetic context for one forward pass.

    ``matmul`` and ``add`` compute exactly in float64 from their (already
    rounded) operands, then round the result to ``mode``. ``store`` rounds a
    weight or input tensor once, as if it had been held in that format.
    Intermediate magnitudes are tracked before rounding.
    """

    def __init__(self, mode: str = "fp64", counter: FlopCounter | None = None) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown precision mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.counter = counter
        self.trace = PrecisionTrace(mode)

    def _round(self, wide: np.ndarray, site: str, *, intermediate: bool) -> np.ndarray:
        mag = _magnitude(wide)
        if intermediate:
            self.trace.max_abs_intermediate = max(self.trace.max_abs_intermediate, mag)
        limit = _FORMAT_MAX[self.mode]
        n_over = int(np.count_nonzero(~(np.abs(wide) <= limit)))
        if n_over:
            self.trace.overflow_events.append(OverflowEvent(site, mag, n_over))
        return round_to(wide, self.mode)

    def store(self, values: np.ndarray, site: str) -> np.ndarray:
        return self._round(np.asarray(values, dtype=np.float64), site, intermediate=False)

    def matmul(self, a: np.ndarray, b: np.ndarray, site: str) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if self.counter is not None:
            m, k = a.shape
            n = b.shape[1] if b.ndim == 2 else 1
            self.counter.add(2 * m * k * n, site)
        with np.errstate(over="ignore", invalid="ignore"):
            wide = a @ b
        return self._round(wide, site, intermediate=True)

    def add(self, a: np.ndarray, b: np.ndarray, site: str) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(np.broadcast(a, b).size, site)
        with np.errstate(over="ignore", invalid="ignore"):
            wide = np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
        return self._round(wide, site, intermediate=True)

    def elementwise(self, values: np.ndarray, site: str) -> np.ndarray:
        """Round a value produced outside the emulated linear path."""
        return self._round(np.asarray(values, dtype=np.float64), site, intermediate=True)
