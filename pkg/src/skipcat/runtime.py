"""Toy transformer layer for checking compressed forwards end to end.

The layer is one attention block followed by one gated MLP, with no norms
or residual connections, so that every output depends only on the seven
core projections. Inputs are ``d_model x T`` matrices whose columns are the
tokens of one causal sequence.

Only the linear-layer paths are emulated in reduced precision; softmax,
SiLU and the attention products run in float64 and are rounded when they
re-enter a linear path.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .compressor import CompressedLayer, CompressionConfig, compress_layer, groups_from_weights
from .errors import DomainError
from .linalg import LowRankPair, Permutation, skip_forward, skip_transform, strong_rrqr
from .precision import Arithmetic, FlopCounter, PrecisionTrace
from .whitening import GramMatrix, accumulate_gram

__all__ = [
    "ToyLayer",
    "make_toy_layer",
    "dense_forward",
    "compressed_forward",
    "compress_toy_layer",
    "collect_grams",
    "golden_tensors",
    "cosine_similarity",
    "adversarial_pair",
    "fp16_overflow_experiment",
]

CORE = ("q", "k", "v", "o", "gate", "up", "down")


@dataclass(frozen=True)
class ToyLayer:
    weights: dict[str, np.ndarray]
    n_heads: int

    def __post_init__(self) -> None:
        missing = [n for n in CORE if n not in self.weights]
        if missing:
            raise DomainError(f"toy layer is missing projections {missing}")
        w = self.weights
        d = w["q"].shape[1]
        if w["q"].shape[0] % self.n_heads:
            raise DomainError(f"q width {w['q'].shape[0]} not divisible by {self.n_heads} heads")
        checks = [
            w["k"].shape == w["q"].shape,
            w["v"].shape == w["q"].shape,
            w["o"].shape == (d, w["v"].shape[0]),
            w["gate"].shape[1] == d,
            w["up"].shape == w["gate"].shape,
            w["down"].shape == (d, w["gate"].shape[0]),
        ]
        if not all(checks):
            raise DomainError(
                "inconsistent toy layer shapes: "
                + ", ".join(f"{n}{w[n].shape}" for n in CORE)
            )

    @property
    def d_model(self) -> int:
        return self.weights["q"].shape[1]

    @property
    def d_ff(self) -> int:
        return self.weights["gate"].shape[0]


def _orthonormal(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def _spectral_matrix(
    rng: np.random.Generator, d_out: int, d_in: int, decay: float, V: np.ndarray | None = None
) -> np.ndarray:
    k = min(d_out, d_in)
    U = _orthonormal(rng, d_out, k)
    if V is None:
        V = _orthonormal(rng, d_in, k)
    sigma = np.exp(-decay * np.arange(k) / k)
    return (U * sigma) @ V[:, :k].T


def make_toy_layer(
    seed: int,
    d_model: int = 64,
    n_heads: int = 4,
    mlp_ratio: float = 2.75,
    decay: float = 8.0,
    basis_noise: float = 0.05,
) -> ToyLayer:
    """Seeded layer whose weights have singular values ``exp(-decay i / k)``.

    Members of a same-input group share their dominant input directions (a
    common right singular basis, perturbed by ``basis_noise``), as trained
    projections reading one activation stream tend to.
    """
    rng = np.random.default_rng(seed)
    d_ff = int(round(mlp_ratio * d_model))

    def near(V: np.ndarray) -> np.ndarray:
        q, _ = np.linalg.qr(V + basis_noise * rng.standard_normal(V.shape))
        return q

    V_attn = _orthonormal(rng, d_model, d_model)
    V_mlp = _orthonormal(rng, d_model, d_model)
    weights = {n: _spectral_matrix(rng, d_model, d_model, decay, near(V_attn)) for n in ("q", "k", "v")}
    weights["o"] = _spectral_matrix(rng, d_model, d_model, decay)
    for n in ("gate", "up"):
        weights[n] = _spectral_matrix(rng, d_ff, d_model, decay, near(V_mlp))
    weights["down"] = _spectral_matrix(rng, d_model, d_ff, decay)
    return ToyLayer({n: weights[n] for n in CORE}, n_heads)


def _silu(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return z / (1.0 + np.exp(-z))


def _attention_mix(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int) -> np.ndarray:
    d, T = q.shape
    hd = d // n_heads
    out = np.empty_like(v)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = q[sl].T @ k[sl] / np.sqrt(hd)
            scores[mask] = -np.inf
            scores -= scores.max(axis=1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=1, keepdims=True)
            out[sl] = v[sl] @ p.T
    return out


Linear = Callable[[tuple[str, ...], np.ndarray], Mapping[str, np.ndarray]]


def _layer_forward(
    linear: Linear,
    x: np.ndarray,
    n_heads: int,
    ar: Arithmetic,
    taps: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    def tap(name: str, value: np.ndarray) -> None:
        if taps is not None:
            taps[name] = value

    tap("qkv", x)
    qkv = linear(("q", "k", "v"), x)
    ctx = ar.elementwise(_attention_mix(qkv["q"], qkv["k"], qkv["v"], n_heads), "attn:context")
    tap("o", ctx)
    h = linear(("o",), ctx)["o"]
    tap("gate_up", h)
    gu = linear(("gate", "up"), h)
    act = ar.elementwise(_silu(gu["gate"]) * gu["up"], "mlp:gated")
    tap("down", act)
    return linear(("down",), act)["down"]


def _columns(x, d: int) -> tuple[np.ndarray, bool]:
    v = np.asarray(x, dtype=np.float64)
    vec = v.ndim == 1
    if vec:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] != d:
        raise DomainError(f"input must have {d} rows, got shape {np.shape(x)}")
    return v, vec


def dense_forward(
    layer: ToyLayer,
    x,
    arithmetic: Arithmetic | None = None,
    taps: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Reference forward pass through the uncompressed layer."""
    ar = arithmetic or Arithmetic("fp64")
    cols, vec = _columns(x, layer.d_model)

    def linear(names, inp):
        xs = ar.store(inp, "input")
        return {n: ar.matmul(ar.store(layer.weights[n], f"weight:{n}"), xs, f"dense:{n}") for n in names}

    y = _layer_forward(linear, cols, layer.n_heads, ar, taps)
    return y[:, 0] if vec else y


def compressed_forward(
    layer: CompressedLayer,
    x,
    trace_mode: str = "fp64",
    counter: FlopCounter | None = None,
) -> tuple[np.ndarray, PrecisionTrace]:
    """Forward pass through a compressed layer, rounding to ``trace_mode``.

    Each group's shared projection is evaluated once per call; overflow is
    recorded in the returned trace and shows up as infinities in the output.
    """
    n_heads = layer.meta.get("n_heads")
    if n_heads is None:
        raise DomainError("compressed layer carries no head count; build it with compress_toy_layer")
    g0 = layer.group_of("q")
    cols, vec = _columns(x, g0.d_in)
    ar = Arithmetic(trace_mode, counter)

    def linear(names, inp):
        out = layer.group_of(names[0]).forward(inp, ar)
        return {n: out[n] for n in names}

    y = _layer_forward(linear, cols, n_heads, ar)
    return (y[:, 0] if vec else y), ar.trace


def collect_grams(layer: ToyLayer, X: np.ndarray) -> dict[str, GramMatrix]:
    """Gram matrices of each group's input while the dense layer runs on ``X``."""
    taps: dict[str, np.ndarray] = {}
    dense_forward(layer, X, taps=taps)
    return {name: accumulate_gram(inp) for name, inp in taps.items()}


def compress_toy_layer(
    layer: ToyLayer,
    config: CompressionConfig,
    calib_samples: np.ndarray | None = None,
    **kwargs,
) -> CompressedLayer:
    """Compress all seven projections; ``calib_samples`` are required iff whitening."""
    grams = None
    if config.whitening:
        if calib_samples is None:
            raise DomainError("whitening requires calibration samples")
        grams = collect_grams(layer, calib_samples)
    elif calib_samples is not None:
        raise DomainError("calibration samples given but whitening is off")
    out = compress_layer(groups_from_weights(layer.weights), config, grams, **kwargs)
    out.meta["n_heads"] = layer.n_heads
    return out


def golden_tensors(seed: int, tokens: int = 4, **layer_kwargs) -> dict[str, np.ndarray]:
    """Seeded input and dense output, keyed ``golden/<seed>/<tensor>``."""
    layer = make_toy_layer(seed, **layer_kwargs)
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((layer.d_model, tokens))
    y = dense_forward(layer, x)
    return {f"golden/{seed}/x": x, f"golden/{seed}/y": y}


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def adversarial_pair(
    seed: int, r: int = 8, d_in: int = 64, d_out: int = 64, eps: float = 1e-6
) -> LowRankPair:
    """Projection whose leading ``r x r`` block is ``eps * I``.

    Skipping without a permutation then produces ``A' = A2 / eps``.
    """
    rng = np.random.default_rng(seed)
    A = np.hstack([eps * np.eye(r), rng.standard_normal((r, d_in - r))])
    B = rng.standard_normal((d_out, r)) / np.sqrt(r)
    return LowRankPair(B, A)


def fp16_overflow_experiment(
    pair: LowRankPair,
    use_permutation: bool,
    x_samples,
    f: float = 2.0,
) -> PrecisionTrace:
    """Skip-transform ``pair`` and run it in emulated fp16 over ``x_samples``.

    Without permutation the leading block is taken as is; otherwise the
    strong RRQR column order is used.
    """
    perm = strong_rrqr(pair.A, f) if use_permutation else Permutation.identity(pair.d_in)
    factors = skip_transform(pair, perm)
    ar = Arithmetic("fp16")
    skip_forward(factors, np.asarray(x_samples, dtype=np.float64), ar)
    return ar.trace
