"""Benchmark and conversion CLI.

Commands:
  quantize    encode a key tensor into a cache snapshot, print bit accounting
  decode      reconstruct a KVT1 tensor from a cache snapshot
  compare     error/bit metrics for several methods on one tensor (JSON)
  microbench  operation counts and wall-clock for the two decode paths
  report      compare plus rendered figures and a CSV table

Exit codes: 0 success, 1 internal error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
import time
from dataclasses import dataclass

import numpy as np

from .baseline_quant import QuantAxis, dequantize_uniform, quantize_key_grouped, quantize_uniform
from .kv_cache import PackedKVCache, actual_bits_formula, load_snapshot, save_snapshot
from .lut_decode import OpCounter, attention_weights, qk_scores, qk_scores_direct
from .polar_codec import QuantConfig
from .tensor_core import (
    FormatError,
    KeyTensor,
    PairingLayout,
    SyntheticConfig,
    gen_synthetic_keys,
    load_tensor,
    save_tensor,
)

REPORT_VERSION = 1

_LAYOUTS = {"adjacent": PairingLayout.ADJACENT, "halfsplit": PairingLayout.HALF_SPLIT}


@dataclass(frozen=True)
class MethodSpec:
    label: str
    kind: str  # fp16 | polarquant | per-token | per-channel | kivi
    bits: int = 4
    group: int = 32
    angle_bits: int = 4
    radius_bits: int = 4


def parse_method(name: str, default_bits: int, default_group: int) -> MethodSpec:
    """Parse a method string such as polarquant-m4n4 or per-token-4bit."""
    label = name.strip().lower()
    if label == "fp16":
        return MethodSpec(label, "fp16")
    m = re.fullmatch(r"polarquant(?:-m(\d+)n(\d+))?", label)
    if m:
        return MethodSpec(
            label,
            "polarquant",
            angle_bits=int(m.group(1) or 4),
            radius_bits=int(m.group(2) or 4),
        )
    m = re.fullmatch(r"(per-token|per-channel)(?:-(\d+)bit)?", label)
    if m:
        return MethodSpec(label, m.group(1), bits=int(m.group(2) or default_bits))
    m = re.fullmatch(r"kivi(?:-(\d+)bit)?(?:-g(\d+))?", label)
    if m:
        return MethodSpec(
            label, "kivi", bits=int(m.group(1) or default_bits), group=int(m.group(2) or default_group)
        )
    raise ValueError(f"unknown method name: {name!r}")


def _synthetic_spec(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected T,d,SEED")
    try:
        tokens, dim, seed = (int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad synthetic spec {text!r}") from exc
    return tokens, dim, seed


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc


def _add_input_flags(sub: argparse.ArgumentParser) -> None:
    group = sub.add_mutually_exclusive_group(required=True)
    group.add_argument("--input", help="KVT1 tensor file with (T, d) keys")
    group.add_argument(
        "--synthetic",
        type=_synthetic_spec,
        metavar="T,d,SEED",
        help="generate keys instead of reading a file",
    )
    sub.add_argument("--log-mean", type=float, default=0.0, help="synthetic radius log-mean")
    sub.add_argument("--log-std", type=float, default=0.5, help="synthetic radius log-std")
    sub.add_argument(
        "--outlier-channels",
        type=int,
        default=0,
        help="number of leading sub-channels with boosted radius",
    )
    sub.add_argument("--outlier-boost", type=float, default=3.0, help="log-mean boost for outliers")


def _add_codec_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--m", type=int, default=4, help="angle bits")
    sub.add_argument("--n", type=int, default=4, help="radius bits")
    sub.add_argument("--layout", choices=sorted(_LAYOUTS), default="halfsplit")
    sub.add_argument("--residual", type=int, default=0, help="full-precision residual window")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarquant", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    quant = subs.add_parser("quantize", help="encode keys into a cache snapshot")
    _add_input_flags(quant)
    _add_codec_flags(quant)
    quant.add_argument("--out", required=True, help="snapshot output path")
    quant.set_defaults(func=cmd_quantize)

    dec = subs.add_parser("decode", help="reconstruct a KVT1 tensor from a snapshot")
    dec.add_argument("--input", required=True, help="cache snapshot path")
    dec.add_argument("--out", required=True, help="KVT1 output path")
    dec.set_defaults(func=cmd_decode)

    comp = subs.add_parser("compare", help="per-method error and bit metrics (JSON)")
    _add_input_flags(comp)
    _add_codec_flags(comp)
    comp.add_argument(
        "--methods",
        default="fp16,polarquant-m4n4,per-token-4bit,kivi-4bit-g32",
        help="comma-separated method names",
    )
    comp.add_argument("--bits", type=int, default=4, help="default baseline bit width")
    comp.add_argument("--group", type=int, default=32, help="default grouped-channel size")
    comp.add_argument("--seed", type=int, default=0, help="query sampling seed")
    comp.add_argument("--queries", type=int, default=8, help="number of probe queries")
    comp.add_argument("--json", action="store_true", help="accepted for symmetry; output is JSON")
    comp.add_argument(
        "--timings", action="store_true", help="include wall-clock (breaks byte determinism)"
    )
    comp.set_defaults(func=cmd_compare)

    micro = subs.add_parser("microbench", help="decode-path op counts and wall-clock")
    micro.add_argument("--lengths", type=_int_list, default=[4096, 8192], metavar="T1,T2,...")
    micro.add_argument("--dim", type=int, default=128)
    micro.add_argument("--m", type=int, default=4)
    micro.add_argument("--n", type=int, default=4)
    micro.add_argument("--layout", choices=sorted(_LAYOUTS), default="halfsplit")
    micro.add_argument("--seed", type=int, default=0)
    micro.add_argument("--json", action="store_true")
    micro.set_defaults(func=cmd_microbench)

    rep = subs.add_parser("report", help="compare plus figures and a CSV table")
    _add_input_flags(rep)
    _add_codec_flags(rep)
    rep.add_argument("--methods", default="fp16,polarquant-m4n4,per-token-4bit,kivi-4bit-g32")
    rep.add_argument("--bits", type=int, default=4)
    rep.add_argument("--group", type=int, default=32)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--queries", type=int, default=8)
    rep.add_argument("--out-dir", required=True, help="directory for CSV and figures")
    rep.set_defaults(func=cmd_report)

    return parser


def _load_keys(args: argparse.Namespace) -> tuple[KeyTensor, str]:
    layout = _LAYOUTS[args.layout]
    if args.input:
        arr = load_tensor(args.input)
        if arr.ndim != 2:
            raise ValueError(f"{args.input}: expected a (T, d) tensor, got shape {arr.shape}")
        return KeyTensor(arr, layout=layout), str(args.input)
    tokens, dim, seed = args.synthetic
    cfg = SyntheticConfig(
        num_tokens=tokens,
        dim=dim,
        radius_log_mean=args.log_mean,
        radius_log_std=args.log_std,
        outlier_channels=frozenset(range(args.outlier_channels)),
        outlier_log_boost=args.outlier_boost,
        seed=seed,
        layout=layout,
    )
    return gen_synthetic_keys(cfg), f"synthetic:{tokens},{dim},{seed}"


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _print_json(payload: dict) -> None:
    print(json.dumps(_jsonify(payload), indent=2, sort_keys=True))


def cmd_quantize(args: argparse.Namespace) -> int:
    keys, origin = _load_keys(args)
    cfg = QuantConfig(args.m, args.n, _LAYOUTS[args.layout])
    cache = PackedKVCache(cfg, args.residual)
    cache.prefill(keys)
    save_snapshot(cache, args.out)
    report = cache.memory_report().as_dict()
    report["input"] = origin
    report["snapshot"] = str(args.out)
    _print_json(report)
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    cache = load_snapshot(args.input)
    block = np.concatenate([cache.decode_quantized(), cache.residual_keys])
    save_tensor(block, args.out)
    print(f"wrote {args.out} ({block.shape[0]} x {block.shape[1]})", file=sys.stderr)
    return 0


def _dot_scores(khat: np.ndarray, queries: np.ndarray, counter: OpCounter) -> np.ndarray:
    scores = khat @ queries.T
    counter.multiplies += khat.size * queries.shape[0]
    counter.additions += khat.size * queries.shape[0]
    return scores


def _evaluate_method(
    spec: MethodSpec, keys: KeyTensor, queries: np.ndarray, residual_len: int
) -> dict:
    num_tokens, dim = keys.data.shape
    counter = OpCounter()
    if spec.kind == "fp16":
        khat = keys.data.astype(np.float16).astype(np.float32)
        scores = _dot_scores(khat, queries, counter)
        avg_bits, payload_bits = 16.0, 16.0
    elif spec.kind == "polarquant":
        cfg = QuantConfig(spec.angle_bits, spec.radius_bits, keys.layout)
        cache = PackedKVCache(cfg, 0)
        cache.prefill(keys)
        khat = cache.decode_quantized()
        scores = np.stack([qk_scores(q, cache, counter) for q in queries], axis=1)
        avg_bits = actual_bits_formula(
            "polarquant",
            num_tokens=num_tokens,
            dim=dim,
            residual_len=residual_len,
            angle_bits=spec.angle_bits,
            radius_bits=spec.radius_bits,
        )
        payload_bits = (spec.angle_bits + spec.radius_bits) / 2
    elif spec.kind in ("per-token", "per-channel"):
        axis = QuantAxis.PER_TOKEN if spec.kind == "per-token" else QuantAxis.PER_CHANNEL
        codes, params = quantize_uniform(keys.data, spec.bits, axis)
        khat = dequantize_uniform(codes, params)
        counter.multiplies += khat.size
        counter.additions += khat.size
        scores = _dot_scores(khat, queries, counter)
        overhead = 32 / dim if spec.kind == "per-token" else 32 / num_tokens
        avg_bits, payload_bits = spec.bits + overhead, float(spec.bits)
    elif spec.kind == "kivi":
        codes, params = quantize_key_grouped(keys.data, spec.bits, spec.group)
        khat = dequantize_uniform(codes, params)
        counter.multiplies += khat.size
        counter.additions += khat.size
        scores = _dot_scores(khat, queries, counter)
        avg_bits = actual_bits_formula(
            "kivi",
            num_tokens=num_tokens,
            dim=dim,
            group_size=spec.group,
            residual_len=residual_len,
            bits=spec.bits,
        )
        payload_bits = float(spec.bits)
    else:  # pragma: no cover - parse_method guards this
        raise ValueError(f"unhandled method kind {spec.kind}")

    diff = keys.data.astype(np.float64) - khat.astype(np.float64)
    temperature = 1.0 / math.sqrt(dim)
    ref_scores = keys.data @ queries.T
    l1 = 0.0
    matches = 0
    for q in range(queries.shape[0]):
        w_ref = attention_weights(ref_scores[:, q], temperature)
        w_m = attention_weights(scores[:, q], temperature)
        l1 += float(np.abs(w_ref - w_m).sum())
        matches += int(np.argmax(w_ref) == np.argmax(w_m))
    num_queries = queries.shape[0]
    return {
        "bits": {
            "avg_bits_per_element": avg_bits,
            "payload_bits_per_element": payload_bits,
        },
        "reconstruction": {
            "mse": float(np.mean(diff * diff)),
            "max_abs_error": float(np.abs(diff).max()) if diff.size else 0.0,
        },
        "scores": {
            "mse": float(np.mean((scores.astype(np.float64) - ref_scores) ** 2)),
            "weight_l1_drift": l1 / num_queries,
            "argmax_match_rate": matches / num_queries,
        },
        "ops": counter.as_dict(),
    }


def _compare_report(args: argparse.Namespace) -> dict:
    keys, origin = _load_keys(args)
    specs = [parse_method(name, args.bits, args.group) for name in args.methods.split(",") if name]
    if not specs:
        raise ValueError("no methods given")
    num_tokens, dim = keys.data.shape
    rng = np.random.default_rng([args.seed, 0x51C0DE])
    queries = rng.standard_normal((args.queries, dim)).astype(np.float32)
    methods = {}
    timings = {}
    for spec in specs:
        start = time.perf_counter()
        methods[spec.label] = _evaluate_method(spec, keys, queries, args.residual)
        timings[spec.label] = 1e3 * (time.perf_counter() - start)
    report = {
        "report_version": REPORT_VERSION,
        "metadata": {
            "input": origin,
            "num_tokens": num_tokens,
            "dim": dim,
            "layout": args.layout,
            "residual_len": args.residual,
            "seed": args.seed,
            "num_queries": args.queries,
        },
        "methods": methods,
    }
    if getattr(args, "timings", False):
        report["metadata"]["durations_ms"] = timings
    return report


def cmd_compare(args: argparse.Namespace) -> int:
    _print_json(_compare_report(args))
    return 0


def cmd_microbench(args: argparse.Namespace) -> int:
    cfg = QuantConfig(args.m, args.n, _LAYOUTS[args.layout])
    rows = []
    for num_tokens in args.lengths:
        if num_tokens < 1:
            raise ValueError(f"length must be >= 1, got {num_tokens}")
        keys = gen_synthetic_keys(
            SyntheticConfig(num_tokens, args.dim, seed=args.seed, layout=cfg.layout)
        )
        cache = PackedKVCache(cfg, 0)
        cache.prefill(keys)
        query = np.random.default_rng([args.seed, num_tokens]).standard_normal(args.dim)
        query = query.astype(np.float32)
        row = {"num_tokens": num_tokens, "dim": args.dim}
        for label, fn in (("lut", qk_scores), ("dequant", qk_scores_direct)):
            counter = OpCounter()
            fn(query, cache, counter)
            best = min(
                _timed(fn, query, cache) for _ in range(3)
            )
            row[label] = {**counter.as_dict(), "wall_ms": best}
        rows.append(row)
    payload = {
        "report_version": REPORT_VERSION,
        "config": {"m": args.m, "n": args.n, "dim": args.dim, "layout": args.layout},
        "rows": rows,
    }
    if args.json:
        _print_json(payload)
        return 0
    print(f"{'tokens':>8}  {'path':<8}{'multiplies':>12}{'additions':>12}{'lookups':>12}{'wall_ms':>10}")
    for row in rows:
        for label in ("lut", "dequant"):
            stats = row[label]
            print(
                f"{row['num_tokens']:>8}  {label:<8}{stats['multiplies']:>12}"
                f"{stats['additions']:>12}{stats['lookups']:>12}{stats['wall_ms']:>10.3f}"
            )
    return 0


def _timed(fn, query, cache) -> float:
    start = time.perf_counter()
    fn(query, cache)
    return 1e3 * (time.perf_counter() - start)


def cmd_report(args: argparse.Namespace) -> int:
    from . import plots

    args.timings = False
    report = _compare_report(args)
    keys, _ = _load_keys(args)
    paths = plots.render_report(report, keys, args)
    for path in paths:
        print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report, then fail with a distinct code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
