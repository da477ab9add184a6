"""Polar-coordinate quantization of attention key caches.

Post-rotation key sub-vectors concentrate in radius and spread in angle, so
coding each 2D pair as (angle code, radius code) with a single per-channel
scale beats axis-aligned uniform quantization at equal bits.  The package
bundles the codec, uniform baselines, a streaming packed cache with a
full-precision residual window, a lookup-table score path, and a benchmark
CLI.
"""

from .baseline_quant import (
    QuantAxis,
    UniformParams,
    dequantize_uniform,
    quantize_key_grouped,
    quantize_uniform,
)
from .kv_cache import (
    BitReport,
    CacheSnapshot,
    PackedKVCache,
    QuantMethod,
    actual_bits_formula,
    load_snapshot,
    save_snapshot,
)
from .lut_decode import (
    AngleTable,
    OpCounter,
    QueryLUT,
    attention_weights,
    build_angle_table,
    build_query_lut,
    qk_scores,
    qk_scores_direct,
)
from .polar_codec import (
    ChannelScales,
    PolarCodes,
    QuantConfig,
    angle_grid,
    compute_radius_scales,
    decode_keys,
    encode_keys,
    load_codes,
    quantize_angle,
    quantize_radius,
    save_codes,
    to_polar,
)
from .rope import RotationFrequencies, apply_rope, rope_frequencies
from .tensor_core import (
    BadMagicError,
    FormatError,
    KeyTensor,
    PairingLayout,
    PayloadMismatchError,
    SyntheticConfig,
    TruncatedFileError,
    gen_synthetic_keys,
    load_tensor,
    merge_pairs,
    save_tensor,
    split_pairs,
)

__version__ = "0.1.0"

__all__ = [
    "AngleTable",
    "BadMagicError",
    "BitReport",
    "CacheSnapshot",
    "ChannelScales",
    "FormatError",
    "KeyTensor",
    "OpCounter",
    "PackedKVCache",
    "PairingLayout",
    "PayloadMismatchError",
    "PolarCodes",
    "QuantAxis",
    "QuantConfig",
    "QuantMethod",
    "QueryLUT",
    "RotationFrequencies",
    "SyntheticConfig",
    "TruncatedFileError",
    "UniformParams",
    "actual_bits_formula",
    "angle_grid",
    "apply_rope",
    "attention_weights",
    "build_angle_table",
    "build_query_lut",
    "compute_radius_scales",
    "decode_keys",
    "dequantize_uniform",
    "encode_keys",
    "gen_synthetic_keys",
    "load_codes",
    "load_snapshot",
    "load_tensor",
    "merge_pairs",
    "qk_scores",
    "qk_scores_direct",
    "quantize_angle",
    "quantize_key_grouped",
    "quantize_radius",
    "quantize_uniform",
    "rope_frequencies",
    "save_codes",
    "save_snapshot",
    "save_tensor",
    "split_pairs",
    "to_polar",
    "__version__",
]
