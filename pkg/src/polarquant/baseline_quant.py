"""Uniform asymmetric min/max quantizers used as comparison baselines.

Each slice (a token row, a channel column, or a group of consecutive token
rows within a channel) gets a zero-point Z = min and a scale
s = (max - min) / (2^b - 1).  Rounding is half-to-even, matching the polar
codec.  A constant slice has scale 0 and dequantizes exactly to Z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor_core import KeyTensor


class QuantAxis(Enum):
    PER_TOKEN = "per-token"
    PER_CHANNEL = "per-channel"
    PER_CHANNEL_GROUPED = "per-channel-grouped"


@dataclass(frozen=True)
class UniformParams:
    """Zero-points and scales for one quantized block.

    Shapes depend on the axis: () for a single vector, (T,) per token,
    (d,) per channel, or (G, d) for G token groups per channel.
    """

    zero_point: np.ndarray
    scale: np.ndarray
    bits: int
    axis: QuantAxis
    group_size: int | None = None

    def __post_init__(self) -> None:
        zp = np.asarray(self.zero_point, dtype=np.float32)
        sc = np.asarray(self.scale, dtype=np.float32)
        if zp.shape != sc.shape:
            raise ValueError(f"zero-point shape {zp.shape} != scale shape {sc.shape}")
        if sc.size and np.any(sc < 0):
            raise ValueError("scales must be non-negative")
        if self.axis is QuantAxis.PER_CHANNEL_GROUPED and not self.group_size:
            raise ValueError("grouped params need a group_size")
        object.__setattr__(self, "zero_point", zp)
        object.__setattr__(self, "scale", sc)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")


def _quantize_slices(work: np.ndarray, bits: int, red_axis: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    top = (1 << bits) - 1
    zp = work.min(axis=red_axis, keepdims=True)
    scale = (work.max(axis=red_axis, keepdims=True) - zp) / top
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.rint((work - zp) / scale)
    raw = np.where(scale == 0.0, 0.0, raw)
    codes = np.clip(raw, 0, top).astype(np.uint8)
    return codes, zp, scale


def quantize_uniform(
    values: np.ndarray,
    bits: int,
    axis: QuantAxis = QuantAxis.PER_TOKEN,
    group_size: int | None = None,
) -> tuple[np.ndarray, UniformParams]:
    """Quantize a vector or (T, d) matrix along the chosen axis.

    A 1-D input under PER_TOKEN is one slice; under PER_CHANNEL it is read
    as a single token row, so every element is its own (exact) slice.
    PER_CHANNEL_GROUPED requires ``group_size`` and dispatches to
    :func:`quantize_key_grouped`.

    Returns:
        (codes, params) with codes the same shape as the input, uint8.
    """
    _check_bits(bits)
    arr = np.asarray(values, dtype=np.float32)
    if arr.size == 0:
        raise ValueError("cannot quantize an empty slice")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values contain non-finite entries")
    if axis is QuantAxis.PER_CHANNEL_GROUPED:
        if group_size is None:
            raise ValueError("PER_CHANNEL_GROUPED needs group_size")
        return quantize_key_grouped(arr, bits, group_size)
    if arr.ndim not in (1, 2):
        raise ValueError(f"expected a vector or matrix, got shape {arr.shape}")
    work = arr[None, :] if arr.ndim == 1 else arr
    red_axis = 1 if axis is QuantAxis.PER_TOKEN else 0
    codes, zp, scale = _quantize_slices(work, bits, red_axis)
    if arr.ndim == 1:
        codes = codes[0]
        # single-vector PER_TOKEN collapses to scalar params
        if axis is QuantAxis.PER_TOKEN:
            zp, scale = zp.reshape(()), scale.reshape(())
        else:
            zp, scale = zp[0], scale[0]
    else:
        squeeze_axis = red_axis
        zp, scale = zp.squeeze(squeeze_axis), scale.squeeze(squeeze_axis)
    return codes, UniformParams(zp, scale, bits, axis)


def quantize_key_grouped(
    keys: KeyTensor | np.ndarray, bits: int, group_size: int
) -> tuple[np.ndarray, UniformParams]:
    """Grouped per-channel quantization over consecutive token blocks.

    Tokens split into ceil(T / group_size) consecutive groups (the last one
    may be short); each (group, channel) cell gets its own zero-point and
    scale, so the parameter count is ceil(T/g) * d pairs.
    """
    _check_bits(bits)
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    arr = keys.data if isinstance(keys, KeyTensor) else np.asarray(keys, dtype=np.float32)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a nonempty (T, d) matrix, got shape {arr.shape}")
    num_tokens, dim = arr.shape
    num_groups = math.ceil(num_tokens / group_size)
    codes = np.empty((num_tokens, dim), dtype=np.uint8)
    zp = np.empty((num_groups, dim), dtype=np.float32)
    scale = np.empty((num_groups, dim), dtype=np.float32)
    for g in range(num_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, num_tokens)
        block_codes, block_zp, block_scale = _quantize_slices(arr[lo:hi], bits, red_axis=0)
        codes[lo:hi] = block_codes
        zp[g] = block_zp[0]
        scale[g] = block_scale[0]
    params = UniformParams(zp, scale, bits, QuantAxis.PER_CHANNEL_GROUPED, group_size=group_size)
    return codes, params


def dequantize_uniform(codes: np.ndarray, params: UniformParams) -> np.ndarray:
    """Reconstruct float32 values: code * scale + zero-point."""
    codes = np.asarray(codes)
    zp, scale = params.zero_point, params.scale
    if params.axis is QuantAxis.PER_TOKEN and codes.ndim == 2:
        if zp.shape != (codes.shape[0],):
            raise ValueError(f"params cover {zp.shape} tokens, codes have {codes.shape[0]}")
        zp, scale = zp[:, None], scale[:, None]
    elif params.axis is QuantAxis.PER_CHANNEL and codes.ndim == 2:
        if zp.shape != (codes.shape[1],):
            raise ValueError(f"params cover {zp.shape} channels, codes have {codes.shape[1]}")
    elif params.axis is QuantAxis.PER_CHANNEL_GROUPED:
        if codes.ndim != 2:
            raise ValueError("grouped params need (T, d) codes")
        expanded = np.repeat(zp, params.group_size, axis=0)
        if expanded.shape[0] < codes.shape[0] or zp.shape[1] != codes.shape[1]:
            raise ValueError(
                f"params cover {zp.shape[0]}x{params.group_size} tokens x {zp.shape[1]} "
                f"channels, codes are {codes.shape}"
            )
        zp = expanded[: codes.shape[0]]
        scale = np.repeat(scale, params.group_size, axis=0)[: codes.shape[0]]
    elif zp.shape not in ((), codes.shape):
        raise ValueError(f"params shape {zp.shape} does not match codes shape {codes.shape}")
    return (codes.astype(np.float32) * scale + zp).astype(np.float32)
