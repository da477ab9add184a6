"""Rotary position embedding applied to 2D sub-vector pairs.

Pair i (1-based) rotates by angle t * phi_i at position t, where
phi_i = base ** (-2 (i - 1) / d).  The rotation acts on whichever dimension
pairing the caller selects, so the same frequencies serve both the adjacent
and the half-split convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import PairingLayout, merge_pairs, split_pairs


@dataclass(frozen=True)
class RotationFrequencies:
    """Per-pair rotation frequencies for a fixed head dimension.

    ``values[j]`` is the frequency of pair j (0-based), stored in float64
    so position * frequency keeps full precision for positions well beyond
    typical context lengths.
    """

    values: np.ndarray
    base: float
    dim: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] != self.dim // 2:
            raise ValueError(f"expected {self.dim // 2} frequencies, got shape {arr.shape}")
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ValueError("frequencies must be positive and finite")
        object.__setattr__(self, "values", arr)


def rope_frequencies(dim: int, base: float = 10000.0) -> RotationFrequencies:
    """Build the geometric frequency ladder for a head dimension.

    The first pair always has frequency 1; with base > 1 the remaining
    frequencies decay geometrically.

    Args:
        dim: Head dimension, even and >= 2.
        base: Frequency base, > 0.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"dim must be even and >= 2, got {dim}")
    if base <= 0:
        raise ValueError(f"base must be positive, got {base}")
    exponents = -2.0 * np.arange(dim // 2, dtype=np.float64) / dim
    return RotationFrequencies(values=np.power(base, exponents), base=float(base), dim=dim)


def apply_rope(
    vector: np.ndarray,
    position: float,
    freqs: RotationFrequencies,
    layout: PairingLayout = PairingLayout.HALF_SPLIT,
) -> np.ndarray:
    """Rotate each sub-vector pair of ``vector`` by position * frequency.

    Angles are formed in float64 before the trig evaluation; the resulting
    sines and cosines are truncated to float32 and the rotation itself runs
    in float32, matching the rest of the pipeline.

    Args:
        vector: Shape (d,) or (T, d) float array.
        position: Token position (an integer in normal use).
        freqs: Frequencies for dimension d.
        layout: Which dims pair together.

    Returns:
        Rotated float32 array with the same shape as the input.
    """
    arr = np.asarray(vector, dtype=np.float32)
    if arr.shape[-1] != freqs.dim:
        raise ValueError(f"vector dim {arr.shape[-1]} != frequencies dim {freqs.dim}")
    angles = float(position) * freqs.values
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    x, y = split_pairs(arr, layout)
    rx = x * cos - y * sin
    ry = x * sin + y * cos
    out = merge_pairs(rx, ry, layout)
    return out.reshape(arr.shape)
