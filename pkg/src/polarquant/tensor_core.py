"""Tensor containers, binary tensor file I/O, and synthetic key generation.

Key blocks are plain float32 numpy arrays of shape (tokens, dim).  KeyTensor
adds the dimension-pairing convention that rotary embeddings and the polar
codec share, so every even-dimensional vector splits into d/2 two-dimensional
sub-vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"KVT1"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 0

TWO_PI = 2.0 * np.pi


class FormatError(ValueError):
    """A binary container could not be decoded."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """The file ends before the declared header or payload is complete."""


class PayloadMismatchError(FormatError):
    """The payload size disagrees with the dimensions declared in the header."""


class PairingLayout(Enum):
    """How the dimensions of a vector pair up into 2D sub-vectors.

    ADJACENT pairs dims (2j, 2j+1).  HALF_SPLIT pairs dims (j, j + d/2),
    the convention used by fused rotary-embedding kernels, and the default
    everywhere in this package.
    """

    ADJACENT = 0
    HALF_SPLIT = 1


def split_pairs(matrix: np.ndarray, layout: PairingLayout) -> tuple[np.ndarray, np.ndarray]:
    """Return the (x, y) components of every 2D sub-vector.

    Args:
        matrix: Array whose last axis is an even vector dimension d.
        layout: Pairing convention.

    Returns:
        Two views of shape (..., d/2) holding the first and second component
        of each sub-vector.
    """
    d = matrix.shape[-1]
    if d < 2 or d % 2:
        raise ValueError(f"vector dimension must be even and >= 2, got {d}")
    if layout is PairingLayout.ADJACENT:
        return matrix[..., 0::2], matrix[..., 1::2]
    return matrix[..., : d // 2], matrix[..., d // 2 :]


def merge_pairs(x: np.ndarray, y: np.ndarray, layout: PairingLayout) -> np.ndarray:
    """Inverse of :func:`split_pairs`; interleaves components back into vectors."""
    if x.shape != y.shape:
        raise ValueError(f"component shapes differ: {x.shape} vs {y.shape}")
    half = x.shape[-1]
    out = np.empty(x.shape[:-1] + (2 * half,), dtype=np.result_type(x, y))
    if layout is PairingLayout.ADJACENT:
        out[..., 0::2] = x
        out[..., 1::2] = y
    else:
        out[..., :half] = x
        out[..., half:] = y
    return out


@dataclass(frozen=True)
class KeyTensor:
    """A (tokens, dim) block of float32 vectors with a pairing convention.

    The dimension must be even and at least 2; the token count may be zero.
    Instances are treated as immutable once constructed and may be shared
    freely between readers.
    """

    data: np.ndarray
    layout: PairingLayout = PairingLayout.HALF_SPLIT

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if arr.ndim != 2:
            raise ValueError(f"key tensor must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 2 or arr.shape[1] % 2:
            raise ValueError(f"key dimension must be even and >= 2, got {arr.shape[1]}")
        object.__setattr__(self, "data", arr)

    @property
    def num_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def subvectors(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) components of each sub-vector under this tensor's layout."""
        return split_pairs(self.data, self.layout)


def save_tensor(data: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor in the KVT1 container format.

    The layout is: magic ``KVT1``, u8 version, u8 dtype tag, u8 rank,
    rank little-endian u32 dims, then the row-major float32 payload with
    no padding.

    Args:
        data: Array of any rank; cast to float32.  Must be finite.
        path: Destination file path.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds the format limit of 255")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_FLOAT32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a KVT1 tensor file back into a float32 array.

    Raises:
        BadMagicError: The file does not begin with ``KVT1``.
        TruncatedFileError: Header or payload ends early.
        PayloadMismatchError: Trailing bytes beyond the declared payload.
        FormatError: Unsupported version or dtype tag, or non-finite payload.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the magic")
    if blob[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: expected magic {TENSOR_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 7:
        raise TruncatedFileError(f"{path}: header ends before rank byte")
    version, dtype_tag, rank = struct.unpack_from("<BBB", blob, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_tag != DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype_tag}")
    offset = 7
    if len(blob) < offset + 4 * rank:
        raise TruncatedFileError(f"{path}: dims truncated (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    expected = count * 4
    payload = blob[offset:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise PayloadMismatchError(
            f"{path}: {len(payload) - expected} trailing bytes beyond the declared payload"
        )
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return arr


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters for the synthetic key generator.

    Each sub-channel j draws its radius from a lognormal with parameters
    (radius_log_mean[j], radius_log_std[j]) and its angle uniformly from
    [0, 2pi).  Channels listed in ``outlier_channels`` get their log-mean
    inflated by ``outlier_log_boost``, mimicking the handful of
    large-magnitude key channels seen in real attention caches.
    """

    num_tokens: int
    dim: int
    radius_log_mean: np.ndarray = field(default=0.0)  # scalar or (d/2,)
    radius_log_std: np.ndarray = field(default=0.5)
    outlier_channels: frozenset[int] = frozenset()
    outlier_log_boost: float = 3.0
    seed: int = 0
    layout: PairingLayout = PairingLayout.HALF_SPLIT

    def __post_init__(self) -> None:
        if self.num_tokens < 0:
            raise ValueError(f"num_tokens must be >= 0, got {self.num_tokens}")
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"dim must be even and >= 2, got {self.dim}")
        half = self.dim // 2
        mean = np.broadcast_to(np.asarray(self.radius_log_mean, dtype=np.float64), (half,)).copy()
        std = np.broadcast_to(np.asarray(self.radius_log_std, dtype=np.float64), (half,)).copy()
        if np.any(std < 0):
            raise ValueError("radius_log_std must be non-negative")
        channels = frozenset(int(c) for c in self.outlier_channels)
        if any(c < 0 or c >= half for c in channels):
            raise ValueError(f"outlier channel index out of range [0, {half})")
        object.__setattr__(self, "radius_log_mean", mean)
        object.__setattr__(self, "radius_log_std", std)
        object.__setattr__(self, "outlier_channels", channels)


def gen_synthetic_keys(cfg: SyntheticConfig) -> KeyTensor:
    """Draw a deterministic synthetic post-rotation key tensor.

    The same config (including seed) always produces the same bytes.
    """
    half = cfg.dim // 2
    mean = cfg.radius_log_mean.copy()
    if cfg.outlier_channels:
        idx = np.fromiter(sorted(cfg.outlier_channels), dtype=np.intp)
        mean[idx] += cfg.outlier_log_boost
    rng = np.random.default_rng(cfg.seed)
    radius = rng.lognormal(mean=mean, sigma=cfg.radius_log_std, size=(cfg.num_tokens, half))
    theta = rng.uniform(0.0, TWO_PI, size=(cfg.num_tokens, half))
    x = (radius * np.cos(theta)).astype(np.float32)
    y = (radius * np.sin(theta)).astype(np.float32)
    return KeyTensor(merge_pairs(x, y, cfg.layout), layout=cfg.layout)
