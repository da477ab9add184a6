"""Polar-coordinate codec for paired key dimensions.

Every 2D sub-vector (x, y) becomes a radius/angle pair: the angle is
quantized on a uniform circular grid with ``angle_bits`` bits, the radius on
a per-sub-channel uniform grid with ``radius_bits`` bits whose scale is the
channel's maximum radius divided by the top code.  There are no zero-points:
radii are non-negative by construction, so a scale per channel is the entire
parameter set.

Codes are stored bit-packed in two separate streams (angles, then radii),
token-major, little-endian bit order within each byte.  The PQC1 container
serializes header, scales, and both streams back-to-back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import (
    TWO_PI,
    BadMagicError,
    FormatError,
    KeyTensor,
    PairingLayout,
    PayloadMismatchError,
    TruncatedFileError,
    merge_pairs,
    split_pairs,
)

CODES_MAGIC = b"PQC1"

_MAX_BITS = 8


def _check_bits(bits: int, what: str) -> None:
    if not 1 <= bits <= _MAX_BITS:
        raise ValueError(f"{what} must be in [1, {_MAX_BITS}], got {bits}")


@dataclass(frozen=True)
class QuantConfig:
    """Bit widths and pairing convention for the polar codec."""

    angle_bits: int = 4
    radius_bits: int = 4
    layout: PairingLayout = PairingLayout.HALF_SPLIT

    def __post_init__(self) -> None:
        _check_bits(self.angle_bits, "angle_bits")
        _check_bits(self.radius_bits, "radius_bits")

    @property
    def angle_levels(self) -> int:
        return 1 << self.angle_bits

    @property
    def radius_levels(self) -> int:
        return 1 << self.radius_bits


@dataclass(frozen=True)
class ChannelScales:
    """Per-sub-channel radius scales, stored at float16.

    Scales are the only quantization parameters the codec needs; they are
    kept in half precision on disk and widened to float32 for arithmetic.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float16)
        if arr.ndim != 1:
            raise ValueError(f"scales must be 1-D, got shape {arr.shape}")
        if arr.size and (np.any(arr < 0) or not np.all(np.isfinite(arr.astype(np.float32)))):
            raise ValueError("scales must be finite and non-negative")
        object.__setattr__(self, "values", arr)

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    def as_compute(self) -> np.ndarray:
        """Scales widened to float32 for arithmetic."""
        return self.values.astype(np.float32)


def stream_bytes(count: int, bits: int) -> int:
    """Packed byte length of ``count`` codes at ``bits`` bits each."""
    return (count * bits + 7) // 8


def pack_stream(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack codes into a contiguous little-endian stream.

    Code i occupies bits [i*bits, (i+1)*bits) of the stream; bit k of the
    stream lives in byte k//8 at position k%8 (LSB first).  Only the final
    byte may carry padding bits, which are zero.
    """
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if flat.size == 0:
        return b""
    shifts = np.arange(bits, dtype=np.uint8)
    bit_rows = (flat[:, None] >> shifts) & 1
    return np.packbits(bit_rows.ravel(), bitorder="little").tobytes()

def unpack_stream(stream: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_stream`; returns ``count`` uint8 codes."""
    expected = stream_bytes(count, bits)
    if len(stream) != expected:
        raise ValueError(f"stream has {len(stream)} bytes, expected {expected}")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = np.frombuffer(stream, dtype=np.uint8)
    bit_arr = np.unpackbits(raw, count=count * bits, bitorder="little")
    shifts = np.arange(bits, dtype=np.uint16)
    vals = (bit_arr.reshape(count, bits).astype(np.uint16) << shifts).sum(axis=1)
    return vals.astype(np.uint8)


@dataclass(frozen=True)
class PolarCodes:
    """Bit-packed angle and radius codes for a block of tokens."""

    num_tokens: int
    dim: int
    angle_bits: int
    radius_bits: int
    layout: PairingLayout
    angle_stream: bytes
    radius_stream: bytes

    def __post_init__(self) -> None:
        if self.num_tokens < 0:
            raise ValueError(f"num_tokens must be >= 0, got {self.num_tokens}")
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"dim must be even and >= 2, got {self.dim}")
        _check_bits(self.angle_bits, "angle_bits")
        _check_bits(self.radius_bits, "radius_bits")
        count = self.num_tokens * (self.dim // 2)
        for name, stream, bits in (
            ("angle", self.angle_stream, self.angle_bits),
            ("radius", self.radius_stream, self.radius_bits),
        ):
            if len(stream) != stream_bytes(count, bits):
                raise ValueError(
                    f"{name} stream has {len(stream)} bytes, expected {stream_bytes(count, bits)}"
                )

    @classmethod
    def from_arrays(
        cls,
        angle: np.ndarray,
        radius: np.ndarray,
        cfg: QuantConfig,
        dim: int | None = None,
    ) -> "PolarCodes":
        """Pack (T, d/2) angle and radius code arrays."""
        angle = np.asarray(angle)
        radius = np.asarray(radius)
        if angle.shape != radius.shape or angle.ndim != 2:
            raise ValueError(f"code arrays must share a (T, d/2) shape, got {angle.shape} and {radius.shape}")
        half = angle.shape[1]
        dim = 2 * half if dim is None else dim
        if dim != 2 * half:
            raise ValueError(f"dim {dim} does not match {half} sub-channels")
        return cls(
            num_tokens=angle.shape[0],
            dim=dim,
            angle_bits=cfg.angle_bits,
            radius_bits=cfg.radius_bits,
            layout=cfg.layout,
            angle_stream=pack_stream(angle, cfg.angle_bits),
            radius_stream=pack_stream(radius, cfg.radius_bits),
        )

    def angle_codes(self) -> np.ndarray:
        """Unpacked (T, d/2) uint8 angle codes."""
        count = self.num_tokens * (self.dim // 2)
        return unpack_stream(self.angle_stream, self.angle_bits, count).reshape(
            self.num_tokens, self.dim // 2
        )

    def radius_codes(self) -> np.ndarray:
        """Unpacked (T, d/2) uint8 radius codes."""
        count = self.num_tokens * (self.dim // 2)
        return unpack_stream(self.radius_stream, self.radius_bits, count).reshape(
            self.num_tokens, self.dim // 2
        )

    def config(self) -> QuantConfig:
        return QuantConfig(self.angle_bits, self.radius_bits, self.layout)


def to_polar(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert Cartesian sub-vector components to (radius, angle).

    The angle is atan2 shifted by pi so it lands in [0, 2pi); the boundary
    value 2pi wraps to 0.  The origin maps to angle pi (atan2(0, 0) is 0),
    which is harmless because its radius code is 0.
    """
    radius = np.hypot(x, y)
    theta = np.mod(np.arctan2(y, x) + np.pi, TWO_PI)
    return radius, theta


def quantize_angle(theta: np.ndarray, angle_bits: int) -> np.ndarray:
    """Round angles to the nearest point of the circular grid.

    code = round(2^(m-1) * theta / pi) mod 2^m with round-half-to-even, so
    the wrap at 2pi lands back on code 0.
    """
    _check_bits(angle_bits, "angle_bits")
    half_levels = 1 << (angle_bits - 1)
    raw = np.rint(np.asarray(theta) * (half_levels / np.pi)).astype(np.int64)
    return (raw % (2 * half_levels)).astype(np.uint8)


def angle_grid(angle_bits: int) -> np.ndarray:
    """Decoded angle for each code, float64, in [-pi, pi).

    Decoding subtracts pi to undo the shift applied before quantization;
    without it every reconstructed sub-vector would come back negated.
    """
    _check_bits(angle_bits, "angle_bits")
    half_levels = 1 << (angle_bits - 1)
    codes = np.arange(2 * half_levels, dtype=np.float64)
    return np.pi * codes / half_levels - np.pi


def compute_radius_scales(keys: KeyTensor | np.ndarray, cfg: QuantConfig) -> ChannelScales:
    """Per-sub-channel scales: max radius over tokens / top radius code.

    An all-zero channel gets scale 0; its codes are forced to 0 and decode
    to the origin.

    Raises:
        ValueError: Empty tensor (scales are undefined without tokens).
    """
    matrix = keys.data if isinstance(keys, KeyTensor) else np.asarray(keys, dtype=np.float32)
    if matrix.shape[0] == 0:
        raise ValueError("cannot compute scales from an empty tensor")
    x, y = split_pairs(matrix, cfg.layout)
    radius, _ = to_polar(x, y)
    top = radius.max(axis=0).astype(np.float32)
    return ChannelScales(top / (cfg.radius_levels - 1))


def quantize_radius(
    radius: np.ndarray, scale: np.ndarray, radius_bits: int
) -> np.ndarray:
    """Round radii to code * scale points, clamping to the code range.

    Broadcasting applies: ``radius`` may be (T, d/2) against a (d/2,) scale
    vector, or both may be scalars.  Zero scales force code 0.
    """
    _check_bits(radius_bits, "radius_bits")
    codes, _ = _quantize_radius_counted(np.asarray(radius), np.asarray(scale), radius_bits)
    return codes


def _quantize_radius_counted(
    radius: np.ndarray, scale: np.ndarray, radius_bits: int
) -> tuple[np.ndarray, int]:
    """Radius quantization plus the number of entries clamped from above."""
    top = (1 << radius_bits) - 1
    scale32 = scale.astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.rint(radius / scale32)
    raw = np.where(scale32 == 0.0, 0.0, raw)
    clamped = int(np.count_nonzero(raw > top))
    codes = np.clip(raw, 0, top)
    return codes.astype(np.uint8), clamped


def quantize_subvectors(
    x: np.ndarray,
    y: np.ndarray,
    scales: ChannelScales,
    cfg: QuantConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Array-level encode: (angle codes, radius codes, clamp event count).

    Canonical form: a radius code of 0 forces the angle code that the origin
    itself would produce (2^(m-1)), and zero-scale channels force both codes
    to 0.  Re-encoding any decoded point therefore reproduces its codes
    exactly.
    """
    radius, theta = to_polar(x, y)
    angle = quantize_angle(theta, cfg.angle_bits)
    rcodes, clamped = _quantize_radius_counted(radius, scales.as_compute(), cfg.radius_bits)
    angle = np.where(rcodes == 0, np.uint8(cfg.angle_levels // 2), angle)
    zero_scale = scales.as_compute() == 0.0
    if np.any(zero_scale):
        angle = np.where(zero_scale, np.uint8(0), angle)
        rcodes = np.where(zero_scale, np.uint8(0), rcodes)
    return angle.astype(np.uint8), rcodes.astype(np.uint8), clamped


def dequantize_subvectors(
    angle: np.ndarray,
    rcodes: np.ndarray,
    scales: ChannelScales,
    cfg: QuantConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Array-level decode back to Cartesian (x, y) components, float32."""
    grid = angle_grid(cfg.angle_bits)
    cos = np.cos(grid).astype(np.float32)
    sin = np.sin(grid).astype(np.float32)
    rhat = rcodes.astype(np.float32) * scales.as_compute()
    return rhat * cos[angle], rhat * sin[angle]


def encode_keys(
    keys: KeyTensor | np.ndarray, scales: ChannelScales, cfg: QuantConfig
) -> PolarCodes:
    """Quantize a whole key block against fixed channel scales.

    Args:
        keys: (T, d) finite float tensor; paired per ``cfg.layout``.
        scales: d/2 channel scales (typically from
            :func:`compute_radius_scales` over the same block).
        cfg: Bit widths and layout.

    Returns:
        Bit-packed codes for all T tokens.
    """
    matrix = keys.data if isinstance(keys, KeyTensor) else np.asarray(keys, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"keys must be 2-D, got shape {matrix.shape}")
    if scales.num_channels != matrix.shape[1] // 2:
        raise ValueError(
            f"{scales.num_channels} scales for {matrix.shape[1]} dims (need d/2)"
        )
    if matrix.size and not np.all(np.isfinite(matrix)):
        raise ValueError("keys contain non-finite values")
    x, y = split_pairs(matrix, cfg.layout)
    angle, rcodes, _ = quantize_subvectors(x, y, scales, cfg)
    return PolarCodes.from_arrays(angle, rcodes, cfg, dim=matrix.shape[1])


def decode_keys(
    codes: PolarCodes, scales: ChannelScales, cfg: QuantConfig | None = None
) -> KeyTensor:
    """Reconstruct a float32 key block from packed codes.

    ``cfg`` is optional because the codes carry their own bit widths and
    layout; when given it must agree with them.
    """
    if cfg is not None and cfg != codes.config():
        raise ValueError(f"config {cfg} does not match codes {codes.config()}")
    if scales.num_channels != codes.dim // 2:
        raise ValueError(
            f"{scales.num_channels} scales for {codes.dim} dims (need d/2)"
        )
    x, y = dequantize_subvectors(
        codes.angle_codes(), codes.radius_codes(), scales, codes.config()
    )
    return KeyTensor(merge_pairs(x, y, codes.layout), layout=codes.layout)


def save_codes(codes: PolarCodes, scales: ChannelScales, path: str | Path) -> None:
    """Write codes and scales in the PQC1 container format."""
    if scales.num_channels != codes.dim // 2:
        raise ValueError(f"{scales.num_channels} scales for {codes.dim} dims")
    with open(path, "wb") as fh:
        fh.write(_codes_blob(codes, scales))


def _codes_blob(codes: PolarCodes, scales: ChannelScales) -> bytes:
    header = CODES_MAGIC + struct.pack(
        "<IIBBB",
        codes.num_tokens,
        codes.dim,
        codes.angle_bits,
        codes.radius_bits,
        codes.layout.value,
    )
    return b"".join(
        (header, scales.values.astype("<f2").tobytes(), codes.angle_stream, codes.radius_stream)
    )


def load_codes(path: str | Path) -> tuple[PolarCodes, ChannelScales]:
    """Read a PQC1 file; the inverse of :func:`save_codes`.

    Raises the same family of decode errors as the tensor container: bad
    magic, truncation, or trailing bytes each get their own exception.
    """
    blob = Path(path).read_bytes()
    codes, scales, offset = _parse_codes_blob(blob, str(path))
    if offset != len(blob):
        raise PayloadMismatchError(
            f"{path}: {len(blob) - offset} trailing bytes beyond the code streams"
        )
    return codes, scales


def _parse_codes_blob(blob: bytes, origin: str) -> tuple[PolarCodes, ChannelScales, int]:
    """Decode one PQC1 block from ``blob``; returns the end offset too."""
    if len(blob) < 4:
        raise TruncatedFileError(f"{origin}: file shorter than the magic")
    if blob[:4] != CODES_MAGIC:
        raise BadMagicError(f"{origin}: expected magic {CODES_MAGIC!r}, got {blob[:4]!r}")
    header_len = 4 + struct.calcsize("<IIBBB")
    if len(blob) < header_len:
        raise TruncatedFileError(f"{origin}: header truncated")
    num_tokens, dim, angle_bits, radius_bits, layout_tag = struct.unpack_from("<IIBBB", blob, 4)
    try:
        layout = PairingLayout(layout_tag)
    except ValueError as exc:
        raise FormatError(f"{origin}: unknown layout tag {layout_tag}") from exc
    if dim < 2 or dim % 2:
        raise FormatError(f"{origin}: invalid dim {dim}")
    if not (1 <= angle_bits <= _MAX_BITS and 1 <= radius_bits <= _MAX_BITS):
        raise FormatError(f"{origin}: bit widths ({angle_bits}, {radius_bits}) out of range")
    half = dim // 2
    count = num_tokens * half
    offset = header_len
    sections = (
        ("scales", 2 * half),
        ("angle stream", stream_bytes(count, angle_bits)),
        ("radius stream", stream_bytes(count, radius_bits)),
    )
    bounds = []
    for name, size in sections:
        if len(blob) < offset + size:
            raise TruncatedFileError(f"{origin}: {name} truncated")
        bounds.append((offset, offset + size))
        offset += size
    scales = ChannelScales(np.frombuffer(blob[bounds[0][0] : bounds[0][1]], dtype="<f2"))
    codes = PolarCodes(
        num_tokens=num_tokens,
        dim=dim,
        angle_bits=angle_bits,
        radius_bits=radius_bits,
        layout=layout,
        angle_stream=blob[bounds[1][0] : bounds[1][1]],
        radius_stream=blob[bounds[2][0] : bounds[2][1]],
    )
    return codes, scales, offset
