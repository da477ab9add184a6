"""Query-key scoring straight from polar codes via lookup tables.

The angle grid has 2^m points, so for a fixed query every partial product
q_pair . unit(angle) takes one of 2^m values per sub-channel.  Building that
(d/2) x 2^m table once per query turns each quantized token's score into
d/2 table gathers, one multiply by the dequantized radius, and one add,
instead of full dequantization.  Radius dequantization is itself a per-cache
(d/2) x 2^n table because the scales freeze at prefill.

Both score paths thread an optional OpCounter that tallies the arithmetic
actually performed, which is how the LUT path's multiply count
(T * d/2 + d * 2^m per query, against 2 * T * d for dequantize-then-dot)
gets verified rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kv_cache import PackedKVCache
from .polar_codec import angle_grid
from .tensor_core import PairingLayout, split_pairs


@dataclass
class OpCounter:
    """Tally of arithmetic performed by a decode path.

    Vectorized operations add their element counts, so the totals match
    what a scalar implementation would execute.
    """

    multiplies: int = 0
    additions: int = 0
    lookups: int = 0

    def reset(self) -> None:
        self.multiplies = self.additions = self.lookups = 0

    def as_dict(self) -> dict:
        return {
            "multiplies": self.multiplies,
            "additions": self.additions,
            "lookups": self.lookups,
        }


@dataclass(frozen=True)
class AngleTable:
    """Unit vectors of every decoded grid angle, float32."""

    cos: np.ndarray
    sin: np.ndarray
    angle_bits: int

    def unit_vectors(self) -> np.ndarray:
        """(2^m, 2) array of (cos, sin) rows."""
        return np.stack([self.cos, self.sin], axis=1)


def build_angle_table(angle_bits: int) -> AngleTable:
    """Tabulate cos/sin of the decoded angle for each angle code.

    Entry a and entry (a + 2^(m-1)) mod 2^m are antipodal, so the table
    covers the full circle with unit-norm rows.
    """
    grid = angle_grid(angle_bits)
    return AngleTable(
        cos=np.cos(grid).astype(np.float32),
        sin=np.sin(grid).astype(np.float32),
        angle_bits=angle_bits,
    )


@dataclass(frozen=True)
class QueryLUT:
    """Per-sub-channel partial dot products of one query, (d/2, 2^m)."""

    partial: np.ndarray
    angle_bits: int
    layout: PairingLayout


def build_query_lut(
    query: np.ndarray,
    table: AngleTable,
    layout: PairingLayout = PairingLayout.HALF_SPLIT,
    counter: OpCounter | None = None,
) -> QueryLUT:
    """Precompute q_pair . unit(angle) for every (sub-channel, angle code).

    Costs d * 2^m multiplies and (d/2) * 2^m adds, independent of the
    number of cached tokens.
    """
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    qx, qy = split_pairs(q, layout)
    partial = qx[:, None] * table.cos[None, :] + qy[:, None] * table.sin[None, :]
    if counter is not None:
        entries = partial.size
        counter.multiplies += 2 * entries
        counter.additions += entries
    return QueryLUT(partial=partial.astype(np.float32), angle_bits=table.angle_bits, layout=layout)


def _residual_scores(
    query: np.ndarray, residual: np.ndarray, counter: OpCounter | None
) -> np.ndarray:
    if residual.shape[0] == 0:
        return np.zeros(0, dtype=np.float32)
    scores = residual.astype(np.float32) @ query
    if counter is not None:
        counter.multiplies += residual.size
        counter.additions += residual.size
    return scores.astype(np.float32)


def qk_scores(
    query: np.ndarray, cache: PackedKVCache, counter: OpCounter | None = None
) -> np.ndarray:
    """Scores of one query against every cached token, via the query LUT.

    Quantized tokens come first (one gather + multiply + add per
    sub-channel, accumulated channel-major in float32), followed by exact
    dot products against the residual window, preserving token order.

    Args:
        query: (d,) float vector.
        cache: Prefilled cache; its layout and bit widths drive the tables.
        counter: Optional arithmetic tally.

    Returns:
        (T,) float32 score vector.
    """
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != cache.dim:
        raise ValueError(f"query dim {q.shape[0]} != cache dim {cache.dim}")
    table = build_angle_table(cache.cfg.angle_bits)
    lut = build_query_lut(q, table, cache.cfg.layout, counter)
    angle, radius = cache.code_arrays()
    rhat_table = cache.radius_table()
    num_quantized = angle.shape[0]
    acc = np.zeros(num_quantized, dtype=np.float32)
    for j in range(angle.shape[1]):
        partial_j = lut.partial[j, angle[:, j]]
        rhat_j = rhat_table[j, radius[:, j]]
        acc += partial_j * rhat_j
        if counter is not None:
            counter.multiplies += num_quantized
            counter.additions += num_quantized
            counter.lookups += 2 * num_quantized
    tail = _residual_scores(q, cache.residual_keys, counter)
    return np.concatenate([acc, tail])


def qk_scores_direct(
    query: np.ndarray, cache: PackedKVCache, counter: OpCounter | None = None
) -> np.ndarray:
    """Reference path: dequantize every cached key, then dot with the query.

    Dequantization pulls the radius and unit-vector components from the
    same tables the LUT path uses (one multiply per stored element), and
    the dot product costs another multiply-add per element: 2 * T * d
    multiplies per query in total.
    """
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != cache.dim:
        raise ValueError(f"query dim {q.shape[0]} != cache dim {cache.dim}")
    table = build_angle_table(cache.cfg.angle_bits)
    angle, radius = cache.code_arrays()
    rhat_table = cache.radius_table()
    channel_idx = np.arange(angle.shape[1])[None, :]
    rhat = rhat_table[channel_idx, radius]
    xhat = rhat * table.cos[angle]
    yhat = rhat * table.sin[angle]
    qx, qy = split_pairs(q, cache.cfg.layout)
    scores = xhat @ qx + yhat @ qy
    if counter is not None:
        elements = 2 * angle.size  # stored elements in the quantized block
        counter.lookups += 3 * angle.size
        counter.multiplies += elements  # dequantize
        counter.multiplies += elements  # dot
        counter.additions += elements
    tail = _residual_scores(q, cache.residual_keys, counter)
    return np.concatenate([scores.astype(np.float32), tail])


def attention_weights(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of temperature-scaled scores; stable under score shifts.

    Args:
        scores: Nonempty (T,) score vector.
        temperature: Multiplier applied before the softmax, typically
            1/sqrt(d).

    Returns:
        (T,) float64 weights summing to 1.
    """
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("cannot take attention weights of an empty score vector")
    z = arr * float(temperature)
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()
