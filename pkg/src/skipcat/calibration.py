"""Seeded synthetic calibration activations with outlier channels."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

__all__ = ["DEFAULT_SAMPLES", "outlier_channels", "synth_samples", "synth_calibration"]

DEFAULT_SAMPLES = 512
SAMPLES_KEY = "calibration/samples"
CHANNELS_KEY = "calibration/outlier_channels"


def outlier_channels(seed: int, d_in: int, outlier_fraction: float) -> np.ndarray:
    """Sorted indices of the ``ceil(fraction * d_in)`` boosted channels."""
    if not 0.0 <= outlier_fraction <= 1.0:
        raise DomainError(f"outlier_fraction must lie in [0, 1], got {outlier_fraction}")
    n = math.ceil(outlier_fraction * d_in)
    rng = np.random.default_rng([seed, 0xCA1B])
    return np.sort(rng.choice(d_in, size=n, replace=False))


def synth_samples(
    seed: int,
    d_in: int,
    n_samples: int = DEFAULT_SAMPLES,
    outlier_fraction: float = 0.02,
    outlier_gain: float = 100.0,
) -> np.ndarray:
    """``d_in x n_samples`` standard-normal columns with a few channels scaled up."""
    if d_in < 1 or n_samples < 1:
        raise DomainError("d_in and n_samples must be positive")
    X = np.random.default_rng(seed).standard_normal((d_in, n_samples))
    X[outlier_channels(seed, d_in, outlier_fraction)] *= outlier_gain
    return X


def synth_calibration(
    seed: int,
    d_in: int,
    n_samples: int = DEFAULT_SAMPLES,
    outlier_fraction: float = 0.02,
    outlier_gain: float = 100.0,
) -> dict[str, np.ndarray]:
    """Calibration container contents: the samples and the boosted channel ids."""
    X = synth_samples(seed, d_in, n_samples, outlier_fraction, outlier_gain)
    idx = outlier_channels(seed, d_in, outlier_fraction).astype(np.float64)
    return {SAMPLES_KEY: X, CHANNELS_KEY: idx}
