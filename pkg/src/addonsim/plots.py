"""Report figures: latency and throughput bars, stacked stage
breakdowns, and cache hit-rate curves, rendered to PNG files next to
the CSV output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .orchestrator import STAGES  # noqa: E402

# One fixed color per stage so figures stay comparable across scenarios.
_STAGE_COLORS = {
    "text_encode": "#8da0cb",
    "denoise_compute": "#66c2a5",
    "controlnet_wait": "#fc8d62",
    "lora_load_exposed": "#e78ac3",
    "lora_patch": "#a6d854",
    "cache_fetch": "#ffd92f",
    "comm": "#e5c494",
    "vae_decode": "#b3b3b3",
}


def _policy_axis(report: dict) -> tuple[list[str], list[dict]]:
    entries = list(report["policies"])
    return [entry["label"] for entry in entries], entries


def render_latency_bars(report: dict, path: Path) -> Path:
    labels, entries = _policy_axis(report)
    means = [entry["latency_ms"]["mean"] for entry in entries]
    p95s = [entry["latency_ms"]["p95"] for entry in entries]
    fig, ax = plt.subplots(figsize=(7, 0.7 * len(labels) + 1.6))
    y = range(len(labels))
    ax.barh(y, means, color="#4c72b0", label="mean")
    ax.plot(p95s, y, "D", color="#222222", markersize=5, label="p95")
    ax.set_yticks(list(y), labels)
    ax.invert_yaxis()
    ax.set_xlabel("request latency (ms)")
    ax.set_title("End-to-end latency per policy")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_throughput_bars(report: dict, path: Path) -> Path:
    labels, entries = _policy_axis(report)
    values = [entry["throughput_images_per_gpu_min"] for entry in entries]
    fig, ax = plt.subplots(figsize=(7, 0.7 * len(labels) + 1.4))
    y = range(len(labels))
    ax.barh(y, values, color="#55a868")
    ax.set_yticks(list(y), labels)
    ax.invert_yaxis()
    ax.set_xlabel("images per GPU-minute")
    ax.set_title("Throughput per policy (GPU-minute accounting)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_breakdown_bars(report: dict, path: Path) -> Path:
    labels, entries = _policy_axis(report)
    fig, ax = plt.subplots(figsize=(8.5, 0.7 * len(labels) + 2.0))
    y = range(len(labels))
    left = [0.0] * len(labels)
    for stage in STAGES:
        widths = [entry["breakdown_mean_ms"].get(stage, 0.0) for entry in entries]
        ax.barh(y, widths, left=left, color=_STAGE_COLORS[stage], label=stage)
        left = [a + b for a, b in zip(left, widths)]
    ax.set_yticks(list(y), labels)
    ax.invert_yaxis()
    ax.set_xlabel("mean service time (ms)")
    ax.set_title("Latency breakdown by stage")
    ax.legend(loc="upper right", fontsize=7, ncols=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report_figures(report: dict, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "latency_png": render_latency_bars(report, out_dir / "latency.png"),
        "throughput_png": render_throughput_bars(report, out_dir / "throughput.png"),
        "breakdown_png": render_breakdown_bars(report, out_dir / "breakdown.png"),
    }


def render_hit_rate_curves(curves: dict[str, Sequence[tuple[float, float]]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in sorted(curves):
        points = list(curves[name])
        if not points:
            continue
        xs = [c for c, _ in points]
        ys = [r for _, r in points]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("cache capacity (MiB)")
    ax.set_ylabel("hit rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("LRU hit rate vs capacity")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
