"""End-to-end acceptance gate, one test per criterion.

Each test prints a single pass/fail line (visible with ``pytest -s``) and
enforces the stated numeric tolerance and, where one applies, the runtime
budget.  Dot-product comparisons normalize by peak magnitude because
attention scores cancel arbitrarily close to zero.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import polarquant as pq
from polarquant.polar_codec import PolarCodes

TWO_PI = 2 * math.pi


@contextmanager
def criterion(num: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[acceptance] criterion {num}: FAIL - {description}")
        raise
    print(f"[acceptance] criterion {num}: PASS - {description}")


def circular_distance(a, b):
    d = np.abs(a - b) % TWO_PI
    return np.minimum(d, TWO_PI - d)


# --------------------------------------------------------------------------


def test_criterion_1_quantizer_error_bounds():
    desc = "angle error <= pi/2^m and radius error <= s/2 over 1.2e5 sub-vectors"
    with criterion(1, desc):
        start = time.perf_counter()
        rng = np.random.default_rng(101)
        count = 120_000
        theta = rng.uniform(0, TWO_PI, count)
        radii = rng.uniform(0, 37.5, count).astype(np.float32)
        for m in (2, 3, 4):
            codes = pq.quantize_angle(theta, m)
            decoded = (pq.angle_grid(m)[codes] + math.pi) % TWO_PI
            assert circular_distance(theta, decoded).max() <= math.pi / 2**m + 1e-6
        for n in (2, 3, 4):
            scale = np.float16(radii.max() / (2**n - 1)).astype(np.float32)
            codes = pq.quantize_radius(radii, scale, n)
            err = np.abs(radii.astype(np.float64) - codes.astype(np.float64) * float(scale))
            assert err.max() <= float(scale) / 2 + 1e-6
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"took {elapsed:.1f}s, budget 10s"


def test_criterion_2_lut_equals_dequantize_dot():
    desc = "LUT scores match dequantize-then-dot within 1e-4 over 1000 instances"
    with criterion(2, desc):
        start = time.perf_counter()
        rng = np.random.default_rng(202)
        dim = 128
        lengths = np.concatenate(
            [
                np.full(10, 4096),
                np.exp(rng.uniform(math.log(16), math.log(4096), 990)).astype(int),
            ]
        )
        for i, tokens in enumerate(lengths):
            tokens = int(tokens)
            m = int(rng.integers(2, 9))
            n = int(rng.integers(2, 9))
            residual = int(rng.choice([0, 0, 0, 16]))
            layout = pq.PairingLayout.HALF_SPLIT if i % 2 else pq.PairingLayout.ADJACENT
            keys = rng.standard_normal((tokens, dim)).astype(np.float32)
            keys[:, : dim // 8] *= 5.0  # a few wide channels
            cache = pq.PackedKVCache(pq.QuantConfig(m, n, layout), residual)
            cache.prefill(keys)
            query = rng.standard_normal(dim).astype(np.float32)
            lut = pq.qk_scores(query, cache)
            direct = pq.qk_scores_direct(query, cache)
            peak = max(1.0, float(np.abs(direct).max()))
            assert np.abs(lut - direct).max() <= 1e-4 * peak, f"instance {i} (T={tokens})"
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0, f"took {elapsed:.1f}s, budget 30s"


def test_criterion_3_rope_relative_position_identity():
    desc = "dot(R_l q, R_t k) == dot(R_(l-t) q, k) within 1e-4, positions to 1e5"
    with criterion(3, desc):
        rng = np.random.default_rng(303)
        dim = 128
        freqs = pq.rope_frequencies(dim)
        fixed_pairs = [(100_000, 54_321), (99_999, 0), (12_345, 12_345), (70_000, 69_999)]
        for layout in pq.PairingLayout:
            pairs = list(fixed_pairs)
            for _ in range(36):
                l = int(rng.integers(0, 100_001))
                t = int(rng.integers(0, l + 1))
                pairs.append((l, t))
            for l, t in pairs:
                q = rng.standard_normal(dim).astype(np.float32)
                k = rng.standard_normal(dim).astype(np.float32)
                lhs = float(
                    pq.apply_rope(q, l, freqs, layout) @ pq.apply_rope(k, t, freqs, layout)
                )
                rhs = float(pq.apply_rope(q, l - t, freqs, layout) @ k)
                scale = float(np.linalg.norm(q) * np.linalg.norm(k)) + 1.0
                assert abs(lhs - rhs) <= 1e-4 * scale, (layout, l, t)


def test_criterion_4_reference_bit_accounting():
    desc = "avg bits at T=12200, d=128: 4.16 / 5.08 / 4.32 within tolerance"
    with criterion(4, desc):
        polar = pq.actual_bits_formula("polarquant", num_tokens=12200, dim=128, residual_len=128)
        kivi = pq.actual_bits_formula(
            "kivi", num_tokens=12200, dim=128, group_size=32, residual_len=128, bits=4
        )
        kvq = pq.actual_bits_formula("kvquant", num_tokens=12200, bits=4, outlier_fraction=0.01)
        assert abs(polar - 4.16) <= 0.05, polar
        assert abs(kivi - 5.08) <= 0.15, kivi
        assert abs(kvq - 4.32) <= 0.05, kvq


def test_criterion_5_low_bit_configuration():
    desc = "m=4, n=2 payload exactly 3.0 bits/element; s=64 average near 3.29"
    with criterion(5, desc):
        keys = pq.gen_synthetic_keys(pq.SyntheticConfig(400, 64, seed=5))
        cache = pq.PackedKVCache(pq.QuantConfig(4, 2), 0)
        cache.prefill(keys)
        assert cache.memory_report().payload_bits_per_element == 3.0
        avg = pq.actual_bits_formula(
            "polarquant", num_tokens=12200, dim=128, residual_len=64, angle_bits=4, radius_bits=2
        )
        assert abs(avg - 3.29) <= 0.25, avg


def test_criterion_6_outlier_robustness():
    desc = "polar m4n4 beats per-token 4-bit on outlier-channel data, 20/20 seeds"
    with criterion(6, desc):
        start = time.perf_counter()
        cfg = pq.QuantConfig(4, 4)
        wins = 0
        for seed in range(20):
            keys = pq.gen_synthetic_keys(
                pq.SyntheticConfig(
                    2048,
                    64,
                    radius_log_std=0.25,
                    outlier_channels=frozenset({0, 1}),
                    outlier_log_boost=3.0,
                    seed=seed,
                )
            )
            scales = pq.compute_radius_scales(keys, cfg)
            decoded = pq.decode_keys(pq.encode_keys(keys, scales, cfg), scales)
            polar_mse = float(np.mean((keys.data.astype(np.float64) - decoded.data) ** 2))
            codes, params = pq.quantize_uniform(keys.data, 4, pq.QuantAxis.PER_TOKEN)
            recon = pq.dequantize_uniform(codes, params)
            token_mse = float(np.mean((keys.data.astype(np.float64) - recon) ** 2))
            wins += polar_mse < token_mse
        assert wins == 20, f"only {wins}/20 seeds"
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"


def test_criterion_7_operation_counts():
    desc = "LUT path: T*d/2 + d*2^m multiplies/query vs 2*T*d for dequantize"
    with criterion(7, desc):
        dim, m = 128, 4
        for tokens in (4096, 8192):
            keys = pq.gen_synthetic_keys(pq.SyntheticConfig(tokens, dim, seed=7))
            cache = pq.PackedKVCache(pq.QuantConfig(m, 4), 0)
            cache.prefill(keys)
            query = np.random.default_rng(tokens).standard_normal(dim).astype(np.float32)
            lut_counter, direct_counter = pq.OpCounter(), pq.OpCounter()
            pq.qk_scores(query, cache, lut_counter)
            pq.qk_scores_direct(query, cache, direct_counter)
            assert lut_counter.multiplies == tokens * dim // 2 + dim * 2**m
            assert direct_counter.multiplies == 2 * tokens * dim


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(
    arr=hnp.arrays(
        dtype=np.float32,
        shape=hnp.array_shapes(min_dims=1, max_dims=3, min_side=0, max_side=6),
        elements=st.floats(allow_nan=False, allow_infinity=False, width=32),
    ),
    tokens=st.integers(0, 24),
    half=st.integers(1, 8),
    m=st.integers(1, 8),
    n=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
)
def _round_trip_property(arr, tokens, half, m, n, seed, base):
    tensor_path = base / "t.kvt"
    pq.save_tensor(arr, tensor_path)
    back = pq.load_tensor(tensor_path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()

    rng = np.random.default_rng(seed)
    cfg = pq.QuantConfig(m, n)
    angle = rng.integers(0, 2**m, (tokens, half)).astype(np.uint8)
    radius = rng.integers(0, 2**n, (tokens, half)).astype(np.uint8)
    codes = PolarCodes.from_arrays(angle, radius, cfg)
    scales = pq.ChannelScales(rng.uniform(0, 2, half).astype(np.float32))
    codes_path = base / "c.pqc"
    pq.save_codes(codes, scales, codes_path)
    codes2, scales2 = pq.load_codes(codes_path)
    assert codes2 == codes
    assert scales2.values.tobytes() == scales.values.tobytes()


def test_criterion_8_container_round_trips(tmp_path):
    desc = "tensor and code containers round trip bit-exact on random inputs"
    with criterion(8, desc):
        _round_trip_property(base=tmp_path)


def test_criterion_9_streaming_invariants():
    desc = "token conservation, residual bound, zero clamps for s in {0,1,64,128}"
    with criterion(9, desc):
        for residual_len in (0, 1, 64, 128):
            for prefill_tokens in (1, 32, 200):
                pool = pq.gen_synthetic_keys(
                    pq.SyntheticConfig(prefill_tokens, 16, seed=residual_len + prefill_tokens)
                )
                cache = pq.PackedKVCache(pq.QuantConfig(4, 4), residual_len)
                cache.prefill(pool)
                appended = prefill_tokens
                history = [row for row in pool.data]
                rng = np.random.default_rng(99)
                for step in range(150):
                    row = pool.data[int(rng.integers(0, prefill_tokens))]
                    cache.append(row)
                    history.append(row)
                    appended += 1
                    assert cache.num_tokens == appended  # conservation
                    assert cache.residual_tokens <= residual_len
                    assert cache.residual_tokens == min(residual_len, appended)
                    expect = np.stack(history[appended - cache.residual_tokens :]) if cache.residual_tokens else None
                    if expect is not None:
                        assert np.array_equal(cache.residual_keys, expect)
                # appended radii never exceed the prefill maxima
                assert cache.clamp_events == 0
                assert cache.decode_quantized().shape[0] + cache.residual_tokens == appended
