"""CSV and figure rendering behind the report command."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .kv_cache import actual_bits_formula
from .polar_codec import QuantConfig, compute_radius_scales
from .tensor_core import KeyTensor, split_pairs

_CSV_COLUMNS = [
    "method",
    "avg_bits_per_element",
    "payload_bits_per_element",
    "reconstruction_mse",
    "reconstruction_max_abs_error",
    "score_mse",
    "weight_l1_drift",
    "argmax_match_rate",
]


def render_report(report: dict, keys: KeyTensor, args) -> list[str]:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        _write_csv(report, out_dir / "report.csv"),
        _error_figure(report, out_dir / "reconstruction_error.png"),
        _bits_figure(report, args, out_dir / "bits_vs_length.png"),
        _polar_figure(keys, args, out_dir / "polar_subvectors.png"),
    ]


def _write_csv(report: dict, path: Path) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for name, stats in report["methods"].items():
            writer.writerow(
                [
                    name,
                    stats["bits"]["avg_bits_per_element"],
                    stats["bits"]["payload_bits_per_element"],
                    stats["reconstruction"]["mse"],
                    stats["reconstruction"]["max_abs_error"],
                    stats["scores"]["mse"],
                    stats["scores"]["weight_l1_drift"],
                    stats["scores"]["argmax_match_rate"],
                ]
            )
    return str(path)


def _error_figure(report: dict, path: Path) -> str:
    names = list(report["methods"])
    recon = [report["methods"][n]["reconstruction"]["mse"] for n in names]
    score = [report["methods"][n]["scores"]["mse"] for n in names]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), dpi=150)
    for ax, values, title in zip(axes, (recon, score), ("reconstruction MSE", "score MSE")):
        ax.bar(range(len(names)), values, color="#4878a8")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title(title, fontsize=10)
        if any(v > 0 for v in values):
            ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def _bits_figure(report: dict, args, path: Path) -> str:
    from .cli import parse_method

    lengths = np.unique(np.logspace(8, 16, 33, base=2).astype(int))
    fig, ax = plt.subplots(figsize=(6, 4), dpi=150)
    for name in report["methods"]:
        spec = parse_method(name, args.bits, args.group)
        curve = [_avg_bits_at(spec, int(t), report["metadata"]["dim"], args.residual) for t in lengths]
        ax.plot(lengths, curve, label=name)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("context length (tokens)")
    ax.set_ylabel("avg bits / key element")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def _avg_bits_at(spec, num_tokens: int, dim: int, residual_len: int) -> float:
    residual_len = min(residual_len, num_tokens)
    if spec.kind == "fp16":
        return 16.0
    if spec.kind == "polarquant":
        return actual_bits_formula(
            "polarquant",
            num_tokens=num_tokens,
            dim=dim,
            residual_len=residual_len,
            angle_bits=spec.angle_bits,
            radius_bits=spec.radius_bits,
        )
    if spec.kind == "kivi":
        return actual_bits_formula(
            "kivi",
            num_tokens=num_tokens,
            dim=dim,
            group_size=spec.group,
            residual_len=residual_len,
            bits=spec.bits,
        )
    if spec.kind == "per-token":
        return spec.bits + 32 / dim
    return spec.bits + 32 / num_tokens  # per-channel


def _polar_figure(keys: KeyTensor, args, path: Path) -> str:
    cfg = QuantConfig(args.m, args.n, keys.layout)
    scales = compute_radius_scales(keys, cfg)
    x, y = split_pairs(keys.data, cfg.layout)
    channel = int(np.argmax(scales.as_compute()))
    step = max(1, x.shape[0] // 2000)
    cx, cy = x[::step, channel], y[::step, channel]
    top_radius = float(scales.as_compute()[channel]) * (cfg.radius_levels - 1)

    fig, ax = plt.subplots(figsize=(5, 5), dpi=150)
    # quantization grid: radius rings and angle spokes
    for code in range(1, cfg.radius_levels):
        ring = plt.Circle(
            (0, 0), code * float(scales.as_compute()[channel]),
            fill=False, color="0.8", linewidth=0.6,
        )
        ax.add_patch(ring)
    spoke_angles = np.pi * np.arange(cfg.angle_levels) / (cfg.angle_levels // 2) - np.pi
    for ang in spoke_angles:
        ax.plot(
            [0, top_radius * np.cos(ang)], [0, top_radius * np.sin(ang)],
            color="0.85", linewidth=0.5, zorder=0,
        )
    ax.scatter(cx, cy, s=4, alpha=0.5, color="#a84848", zorder=2)
    ax.set_aspect("equal")
    ax.set_title(f"sub-channel {channel} under the m={args.m}, n={args.n} grid", fontsize=10)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)
