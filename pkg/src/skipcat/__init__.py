"""Low-rank weight compression with shared projections and block skipping."""

__version__ = "0.1.0"

from .compressor import (  # noqa: E402
    CompressedLayer,
    CompressionConfig,
    SharedGroup,
    cat_decompose,
    compress_layer,
    concat_group,
    layer_rank_for_rate,
    rank_for_rate,
)
from .costmodel import CostReport, breakeven_rank, cost, cost_curve  # noqa: E402
from .linalg import (  # noqa: E402
    LowRankPair,
    Permutation,
    PermutedSkipFactors,
    schur_identity_check,
    skip_forward,
    skip_transform,
    strong_rrqr,
    truncated_svd,
)

__all__ = [
    "CompressedLayer",
    "CompressionConfig",
    "CostReport",
    "LowRankPair",
    "Permutation",
    "PermutedSkipFactors",
    "SharedGroup",
    "breakeven_rank",
    "cat_decompose",
    "compress_layer",
    "concat_group",
    "cost",
    "cost_curve",
    "layer_rank_for_rate",
    "rank_for_rate",
    "schur_identity_check",
    "skip_forward",
    "skip_transform",
    "strong_rrqr",
    "truncated_svd",
]
