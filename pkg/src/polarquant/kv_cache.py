"""Streaming quantized key cache with a full-precision residual window.

Prefill computes per-channel radius scales over the whole prompt, encodes
everything except the newest ``residual_len`` tokens, and freezes the
scales.  Each later append pushes the incoming key into the residual FIFO
and flushes its oldest entry through the codec; radii that have outgrown
the frozen scales are clamped to the top code, and every clamped
sub-channel bumps a counter.  Values are kept at full precision (an
optional per-token uniform mode exists but is off by default).

Writes are single-threaded; ``snapshot()`` hands concurrent readers an
immutable, internally consistent view that never exposes a partially
flushed token.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .baseline_quant import QuantAxis, dequantize_uniform, quantize_uniform
from .polar_codec import (
    ChannelScales,
    PolarCodes,
    QuantConfig,
    _codes_blob,
    _parse_codes_blob,
    compute_radius_scales,
    dequantize_subvectors,
    quantize_subvectors,
)
from .tensor_core import KeyTensor, PayloadMismatchError, TruncatedFileError, split_pairs

SCALE_BITS = 16  # channel scales are float16
RESIDUAL_BITS = 16  # residual keys counted at half precision


@dataclass(frozen=True)
class BitReport:
    """Key-cache storage accounting, in bits."""

    payload_bits: int
    param_bits: int
    residual_bits: int
    avg_bits_per_element: float
    payload_bits_per_element: float
    num_tokens: int
    quantized_tokens: int
    residual_tokens: int

    @property
    def total_bits(self) -> int:
        return self.payload_bits + self.param_bits + self.residual_bits

    def as_dict(self) -> dict:
        return {
            "payload_bits": self.payload_bits,
            "param_bits": self.param_bits,
            "residual_bits": self.residual_bits,
            "total_bits": self.total_bits,
            "avg_bits_per_element": self.avg_bits_per_element,
            "payload_bits_per_element": self.payload_bits_per_element,
            "num_tokens": self.num_tokens,
            "quantized_tokens": self.quantized_tokens,
            "residual_tokens": self.residual_tokens,
        }


@dataclass(frozen=True)
class CacheSnapshot:
    """Immutable view of a cache: packed codes, scales, residual keys."""

    codes: PolarCodes
    scales: ChannelScales
    residual_keys: np.ndarray
    residual_len: int
    clamp_events: int


class PackedKVCache:
    """Token-streaming key cache storing polar codes plus a residual FIFO."""

    def __init__(
        self,
        cfg: QuantConfig,
        residual_len: int,
        *,
        quantize_values: bool = False,
        value_bits: int = 4,
    ) -> None:
        if residual_len < 0:
            raise ValueError(f"residual_len must be >= 0, got {residual_len}")
        self.cfg = cfg
        self.residual_len = residual_len
        self.quantize_values = quantize_values
        self.value_bits = value_bits
        self.clamp_events = 0
        self._dim: int | None = None
        self._scales: ChannelScales | None = None
        self._angle_blocks: list[np.ndarray] = []
        self._radius_blocks: list[np.ndarray] = []
        self._residual: deque[np.ndarray] = deque()
        self._value_blocks: list = []
        self._radius_table: np.ndarray | None = None
        self._consolidated: tuple[np.ndarray, np.ndarray] | None = None

    # -- state ---------------------------------------------------------

    @property
    def prefilled(self) -> bool:
        return self._scales is not None

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise RuntimeError("cache is empty; prefill first")
        return self._dim

    @property
    def scales(self) -> ChannelScales:
        if self._scales is None:
            raise RuntimeError("cache is empty; prefill first")
        return self._scales

    @property
    def quantized_tokens(self) -> int:
        return sum(block.shape[0] for block in self._angle_blocks)

    @property
    def residual_tokens(self) -> int:
        return len(self._residual)

    @property
    def num_tokens(self) -> int:
        return self.quantized_tokens + self.residual_tokens

    @property
    def residual_keys(self) -> np.ndarray:
        """Residual window as a (k, d) float32 block, oldest first."""
        if not self._residual:
            d = self._dim if self._dim is not None else 0
            return np.zeros((0, d), dtype=np.float32)
        return np.stack(tuple(self._residual))

    # -- writes --------------------------------------------------------

    def prefill(self, keys: KeyTensor | np.ndarray, values: np.ndarray | None = None) -> None:
        """Scale fit + bulk encode of a prompt into an empty cache.

        The newest ``residual_len`` tokens stay in the residual window at
        full precision; if the prompt is no longer than the window, nothing
        is quantized yet (but the scales are fixed regardless).

        Args:
            keys: Nonempty (T, d) block of finite float keys.
            values: Optional (T, d) values; zeros when omitted.
        """
        if self.prefilled or self.num_tokens:
            raise RuntimeError("cache already prefilled")
        matrix = keys.data if isinstance(keys, KeyTensor) else np.asarray(keys, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError(f"keys must be 2-D, got shape {matrix.shape}")
        if matrix.size and not np.all(np.isfinite(matrix)):
            raise ValueError("keys contain non-finite values")
        self._dim = matrix.shape[1]
        self._scales = compute_radius_scales(matrix, self.cfg)
        boundary = max(0, matrix.shape[0] - self.residual_len)
        if boundary:
            self._encode_block(matrix[:boundary])
        for row in matrix[boundary:]:
            self._residual.append(np.array(row, dtype=np.float32))
        self._store_values(matrix.shape[0], values)

    def append(self, key: np.ndarray, value: np.ndarray | None = None) -> None:
        """Stream one token in; may flush the oldest residual token out."""
        if not self.prefilled:
            raise RuntimeError("cache is empty; prefill first")
        row = np.asarray(key, dtype=np.float32).reshape(-1)
        if row.shape[0] != self._dim:
            raise ValueError(f"key dim {row.shape[0]} != cache dim {self._dim}")
        self._residual.append(row.copy())
        while len(self._residual) > self.residual_len:
            self._encode_block(self._residual.popleft()[None, :])
        self._store_values(1, None if value is None else np.asarray(value)[None, :])

    def _encode_block(self, block: np.ndarray) -> None:
        x, y = split_pairs(block, self.cfg.layout)
        angle, radius, clamped = quantize_subvectors(x, y, self._scales, self.cfg)
        self.clamp_events += clamped
        self._angle_blocks.append(angle)
        self._radius_blocks.append(radius)
        self._consolidated = None

    def _store_values(self, count: int, values: np.ndarray | None) -> None:
        if values is None:
            values = np.zeros((count, self._dim), dtype=np.float32)
        else:
            values = np.asarray(values, dtype=np.float32)
            if values.shape != (count, self._dim):
                raise ValueError(f"values shape {values.shape} != ({count}, {self._dim})")
        if self.quantize_values:
            self._value_blocks.append(quantize_uniform(values, self.value_bits, QuantAxis.PER_TOKEN))
        else:
            self._value_blocks.append(values.copy())

    # -- reads ---------------------------------------------------------

    def code_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Consolidated (T_q, d/2) angle and radius code arrays."""
        if self._consolidated is None:
            half = (self._dim or 2) // 2
            empty = np.zeros((0, half), dtype=np.uint8)
            angle = np.concatenate(self._angle_blocks) if self._angle_blocks else empty
            radius = np.concatenate(self._radius_blocks) if self._radius_blocks else empty
            self._consolidated = (angle, radius)
        return self._consolidated

    @property
    def quantized(self) -> PolarCodes:
        angle, radius = self.code_arrays()
        return PolarCodes.from_arrays(angle, radius, self.cfg, dim=self.dim)

    def radius_table(self) -> np.ndarray:
        """(d/2, 2^n) table of dequantized radii, code -> code * scale.

        Query independent, so it is built once per cache (the scales are
        frozen after prefill) and shared by every decode call.
        """
        if self._radius_table is None:
            levels = np.arange(self.cfg.radius_levels, dtype=np.float32)
            self._radius_table = self.scales.as_compute()[:, None] * levels[None, :]
        return self._radius_table

    def decode_quantized(self) -> np.ndarray:
        """Reconstruct the quantized region as a (T_q, d) float32 block."""
        angle, radius = self.code_arrays()
        x, y = dequantize_subvectors(angle, radius, self.scales, self.cfg)
        from .tensor_core import merge_pairs

        return merge_pairs(x, y, self.cfg.layout)

    def values(self) -> np.ndarray:
        """All stored values, (T, d) float32, dequantized if needed."""
        if not self._value_blocks:
            d = self._dim if self._dim is not None else 0
            return np.zeros((0, d), dtype=np.float32)
        blocks = []
        for entry in self._value_blocks:
            if self.quantize_values:
                codes, params = entry
                blocks.append(dequantize_uniform(codes, params))
            else:
                blocks.append(entry)
        return np.concatenate(blocks)

    def snapshot(self) -> CacheSnapshot:
        return CacheSnapshot(
            codes=self.quantized,
            scales=self.scales,
            residual_keys=self.residual_keys,
            residual_len=self.residual_len,
            clamp_events=self.clamp_events,
        )

    def memory_report(self) -> BitReport:
        """Bit accounting of the key cache as currently stored.

        Payload covers the packed code streams (exact bit count, before
        final-byte padding); parameters are the float16 channel scales;
        residual keys count at 16 bits per element.  An empty cache reports
        zeros.
        """
        if not self.prefilled:
            return BitReport(0, 0, 0, 0.0, 0.0, 0, 0, 0)
        tq, tr = self.quantized_tokens, self.residual_tokens
        total = tq + tr
        d = self.dim
        half = d // 2
        payload = tq * half * (self.cfg.angle_bits + self.cfg.radius_bits)
        params = half * SCALE_BITS
        residual = tr * d * RESIDUAL_BITS
        avg = (payload + params + residual) / (total * d) if total else 0.0
        per_elem = payload / (tq * d) if tq else 0.0
        return BitReport(payload, params, residual, avg, per_elem, total, tq, tr)


class QuantMethod(str, Enum):
    """Methods covered by the closed-form average-bits model."""

    POLARQUANT = "polarquant"
    KIVI = "kivi"
    KVQUANT = "kvquant"


def actual_bits_formula(
    method: QuantMethod | str,
    *,
    num_tokens: int,
    dim: int = 128,
    group_size: int | None = None,
    residual_len: int = 0,
    angle_bits: int = 4,
    radius_bits: int = 4,
    bits: int = 4,
    outlier_fraction: float | None = None,
) -> float:
    """Average stored bits per key element at a given context length.

    Per method:
      * polarquant: (m + n)/2 payload, float16 channel scales amortized as
        16 * (d/2) / (T * d), plus 16 * s / T for the residual window.
      * kivi: b payload, one float16 zero-point and scale per
        (group, channel), i.e. 32 / g per element, plus 16 * s / T.
      * kvquant: b payload plus 32 * alpha for the sparse outlier store
        (fraction alpha of entries kept at full precision).

    All overheads sit on top of the payload average, so residual tokens are
    not excluded from the payload term.
    """
    method = QuantMethod(method.lower() if isinstance(method, str) else method)
    if num_tokens < 1:
        raise ValueError(f"num_tokens must be >= 1, got {num_tokens}")
    if dim < 2 or dim % 2:
        raise ValueError(f"dim must be even and >= 2, got {dim}")
    if not 0 <= residual_len <= num_tokens:
        raise ValueError(f"residual_len must be in [0, num_tokens], got {residual_len}")
    if method is QuantMethod.POLARQUANT:
        payload = (angle_bits + radius_bits) / 2
        return (
            payload
            + SCALE_BITS * (dim // 2) / (num_tokens * dim)
            + RESIDUAL_BITS * residual_len / num_tokens
        )
    if method is QuantMethod.KIVI:
        if not group_size or group_size < 1:
            raise ValueError("kivi needs a group_size >= 1")
        return bits + 32 / group_size + RESIDUAL_BITS * residual_len / num_tokens
    if outlier_fraction is None or not 0.0 <= outlier_fraction <= 1.0:
        raise ValueError(f"kvquant needs outlier_fraction in [0, 1], got {outlier_fraction}")
    return bits + 32.0 * outlier_fraction


def save_snapshot(cache: PackedKVCache, path: str | Path) -> None:
    """Serialize a cache snapshot: a PQC1 block plus a residual section.

    The residual section is ``<III`` (window capacity, resident count,
    clamp events) followed by the residual keys as little-endian float32
    rows, oldest first.  Values are not serialized.
    """
    snap = cache.snapshot()
    blob = _codes_blob(snap.codes, snap.scales)
    residual = snap.residual_keys.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<III", snap.residual_len, residual.shape[0], snap.clamp_events))
        fh.write(residual.tobytes())


def load_snapshot(path: str | Path) -> PackedKVCache:
    """Rebuild a prefilled cache from :func:`save_snapshot` output.

    The returned cache accepts further appends; stored values come back as
    zeros since the snapshot format carries keys only.
    """
    blob = Path(path).read_bytes()
    codes, scales, offset = _parse_codes_blob(blob, str(path))
    tail_header = struct.calcsize("<III")
    if len(blob) < offset + tail_header:
        raise TruncatedFileError(f"{path}: residual section header truncated")
    residual_len, count, clamp_events = struct.unpack_from("<III", blob, offset)
    offset += tail_header
    expected = count * codes.dim * 4
    if len(blob) < offset + expected:
        raise TruncatedFileError(f"{path}: residual keys truncated")
    if len(blob) > offset + expected:
        raise PayloadMismatchError(
            f"{path}: {len(blob) - offset - expected} trailing bytes beyond the residual keys"
        )
    residual = np.frombuffer(blob, dtype="<f4", count=count * codes.dim, offset=offset)
    residual = residual.reshape(count, codes.dim).astype(np.float32)

    cache = PackedKVCache(codes.config(), residual_len)
    cache._dim = codes.dim
    cache._scales = scales
    if codes.num_tokens:
        cache._angle_blocks.append(codes.angle_codes())
        cache._radius_blocks.append(codes.radius_codes())
    for row in residual:
        cache._residual.append(row.copy())
    cache.clamp_events = clamp_events
    cache._store_values(codes.num_tokens + count, None)
    return cache
