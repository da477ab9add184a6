"""Streaming cache behavior, bit accounting, and snapshot serialization."""

import math

import numpy as np
import pytest

import polarquant as pq
from polarquant.kv_cache import load_snapshot, save_snapshot


def _keys(tokens, dim=16, seed=0, **kw):
    return pq.gen_synthetic_keys(pq.SyntheticConfig(tokens, dim, seed=seed, **kw))


def _cache(tokens=10, residual=3, dim=16, m=4, n=4, seed=0):
    cache = pq.PackedKVCache(pq.QuantConfig(m, n), residual)
    cache.prefill(_keys(tokens, dim, seed))
    return cache


# ----------------------------------------------------------------- prefill


def test_prefill_split_counts():
    cache = _cache(tokens=10, residual=3)
    assert cache.quantized_tokens == 7
    assert cache.residual_tokens == 3
    assert cache.num_tokens == 10


def test_prefill_shorter_than_window():
    cache = _cache(tokens=4, residual=8)
    assert cache.quantized_tokens == 0
    assert cache.residual_tokens == 4
    assert cache.prefilled  # scales computed even though nothing quantized


def test_prefill_scales_match_offline_computation():
    keys = _keys(20)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 4)
    cache.prefill(keys)
    offline = pq.compute_radius_scales(keys, cache.cfg)
    assert cache.scales.values.tobytes() == offline.values.tobytes()


def test_prefill_residual_holds_newest_tokens_exactly():
    keys = _keys(10)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 3)
    cache.prefill(keys)
    assert np.array_equal(cache.residual_keys, keys.data[7:])


def test_reprefill_and_empty_errors():
    cache = _cache()
    with pytest.raises(RuntimeError):
        cache.prefill(_keys(4))
    fresh = pq.PackedKVCache(pq.QuantConfig(4, 4), 2)
    with pytest.raises(RuntimeError):
        fresh.append(np.zeros(16, dtype=np.float32))
    with pytest.raises(ValueError):
        fresh.prefill(np.zeros((0, 16), dtype=np.float32))


# ------------------------------------------------------------------ append


def test_append_with_zero_window_quantizes_immediately():
    cache = _cache(tokens=5, residual=0)
    assert cache.residual_tokens == 0
    cache.append(_keys(1, seed=9).data[0])
    assert cache.quantized_tokens == 6
    assert cache.residual_tokens == 0


def test_append_flushes_oldest():
    keys = _keys(3)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 2)
    cache.prefill(keys)
    assert (cache.quantized_tokens, cache.residual_tokens) == (1, 2)
    extra = _keys(5, seed=7)
    for row in extra.data:
        cache.append(row)
    assert (cache.quantized_tokens, cache.residual_tokens) == (6, 2)
    assert np.array_equal(cache.residual_keys, extra.data[-2:])


def test_append_dim_mismatch():
    cache = _cache()
    with pytest.raises(ValueError):
        cache.append(np.zeros(8, dtype=np.float32))


def test_clamp_counter_increments_on_outgrown_radius():
    # prefill radius 1 with n=4: scale 1/15; a radius-2 append overflows
    keys = np.array([[1.0, 0.0]], dtype=np.float32)
    cfg = pq.QuantConfig(4, 4, pq.PairingLayout.ADJACENT)
    cache = pq.PackedKVCache(cfg, 0)
    cache.prefill(keys)
    assert cache.clamp_events == 0
    cache.append(np.array([2.0, 0.0], dtype=np.float32))
    assert cache.clamp_events == 1
    angle, radius = cache.code_arrays()
    assert radius[-1, 0] == 15  # clamped to the top code


def test_no_clamps_when_appends_stay_in_range():
    keys = _keys(50, seed=3)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 4)
    cache.prefill(keys)
    for row in keys.data[:20]:
        cache.append(row)
    assert cache.clamp_events == 0


# ---------------------------------------------------------- decode ordering


def test_decode_preserves_token_order():
    keys = _keys(30, seed=5)
    cache = pq.PackedKVCache(pq.QuantConfig(6, 6), 4)
    cache.prefill(keys)
    decoded = cache.decode_quantized()
    # row i of the decode must approximate row i of the input, not a shift
    err = np.linalg.norm(decoded - keys.data[:26], axis=1)
    shifted = np.linalg.norm(decoded[1:] - keys.data[: 25], axis=1)
    assert err.max() < 0.2
    assert np.median(shifted) > np.median(err[1:])


# ------------------------------------------------------------- bit reports


def test_payload_bits_example():
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 0)
    cache.prefill(_keys(256, dim=128))
    report = cache.memory_report()
    assert report.payload_bits == 256 * 64 * 8 == 131072
    assert report.payload_bits_per_element == 4.0


def test_payload_matches_packed_stream_length():
    cache = pq.PackedKVCache(pq.QuantConfig(3, 5), 2)
    cache.prefill(_keys(37, dim=10))
    report = cache.memory_report()
    codes = cache.quantized
    packed_bits = 8 * (len(codes.angle_stream) + len(codes.radius_stream))
    assert 0 <= packed_bits - report.payload_bits < 16  # final-byte slack per stream


def test_empty_cache_reports_zero():
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 0)
    report = cache.memory_report()
    assert report.total_bits == 0 and report.avg_bits_per_element == 0.0


def test_measured_average_at_reference_settings():
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 128)
    cache.prefill(_keys(12200, dim=128, seed=1))
    report = cache.memory_report()
    assert abs(report.avg_bits_per_element - 4.16) <= 0.05


def test_average_decreases_with_length():
    prev = None
    for tokens in (512, 1024, 4096, 16384):
        avg = pq.actual_bits_formula("polarquant", num_tokens=tokens, dim=128, residual_len=128)
        if prev is not None:
            assert avg < prev
        prev = avg


def test_formula_reference_values():
    pq_avg = pq.actual_bits_formula("polarquant", num_tokens=12200, dim=128, residual_len=128)
    kivi = pq.actual_bits_formula(
        "kivi", num_tokens=12200, dim=128, group_size=32, residual_len=128, bits=4
    )
    kvq = pq.actual_bits_formula("kvquant", num_tokens=12200, bits=4, outlier_fraction=0.01)
    assert abs(pq_avg - 4.16) <= 0.05
    assert abs(kivi - 5.08) <= 0.15
    assert abs(kvq - 4.32) <= 0.05


def test_formula_limit_is_payload():
    avg = pq.actual_bits_formula(
        "polarquant", num_tokens=10**12, dim=128, residual_len=128, angle_bits=4, radius_bits=2
    )
    assert 3.0 < avg < 3.0 + 1e-8


def test_formula_validation():
    with pytest.raises(ValueError):
        pq.actual_bits_formula("nope", num_tokens=10)
    with pytest.raises(ValueError):
        pq.actual_bits_formula("polarquant", num_tokens=0)
    with pytest.raises(ValueError):
        pq.actual_bits_formula("kivi", num_tokens=10)  # missing group size
    with pytest.raises(ValueError):
        pq.actual_bits_formula("kvquant", num_tokens=10, outlier_fraction=1.5)
    with pytest.raises(ValueError):
        pq.actual_bits_formula("polarquant", num_tokens=10, residual_len=20)


# --------------------------------------------------------------- snapshots


def test_snapshot_round_trip(tmp_path):
    cache = _cache(tokens=12, residual=3, m=5, n=3, seed=4)
    for row in _keys(6, seed=8).data:
        cache.append(row)
    path = tmp_path / "c.snap"
    save_snapshot(cache, path)
    loaded = load_snapshot(path)
    assert loaded.quantized.angle_stream == cache.quantized.angle_stream
    assert loaded.quantized.radius_stream == cache.quantized.radius_stream
    assert loaded.scales.values.tobytes() == cache.scales.values.tobytes()
    assert np.array_equal(loaded.residual_keys, cache.residual_keys)
    assert loaded.clamp_events == cache.clamp_events
    assert loaded.residual_len == cache.residual_len
    # a loaded cache keeps streaming
    loaded.append(_keys(1, seed=2).data[0])
    assert loaded.num_tokens == cache.num_tokens + 1


def test_snapshot_view_is_stable_across_appends():
    cache = _cache(tokens=10, residual=2)
    snap = cache.snapshot()
    before = (snap.codes.num_tokens, snap.residual_keys.copy())
    for row in _keys(4, seed=6).data:
        cache.append(row)
    assert snap.codes.num_tokens == before[0]
    assert np.array_equal(snap.residual_keys, before[1])


def test_snapshot_with_nothing_quantized(tmp_path):
    cache = _cache(tokens=3, residual=8)
    path = tmp_path / "c.snap"
    save_snapshot(cache, path)
    loaded = load_snapshot(path)
    assert loaded.quantized_tokens == 0
    assert loaded.residual_tokens == 3


# ------------------------------------------------------------------ values


def test_values_round_trip():
    keys = _keys(6)
    values = np.arange(6 * 16, dtype=np.float32).reshape(6, 16)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 2)
    cache.prefill(keys, values)
    cache.append(keys.data[0], values[0])
    out = cache.values()
    assert out.shape == (7, 16)
    assert np.array_equal(out[:6], values)


def test_value_quantize_mode_is_lossy_but_close():
    keys = _keys(6)
    values = np.linspace(-2, 2, 6 * 16, dtype=np.float32).reshape(6, 16)
    cache = pq.PackedKVCache(pq.QuantConfig(4, 4), 2, quantize_values=True, value_bits=8)
    cache.prefill(keys, values)
    out = cache.values()
    assert not np.array_equal(out[:6], values)
    assert np.allclose(out[:6], values, atol=2e-2)
