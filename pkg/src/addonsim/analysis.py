"""Speedup analysis and report aggregation.

The speedup model follows Gustafson's scaled-workload accounting: the
serial fraction s is the share of the offloaded (parallel-mode) request
that stays on the worker's critical path no matter how many branch GPUs
are added (text encode, VAE decode, and the UNet decoder, which must
wait for every branch), and p = 1 - s is the overlappable share. With N
counting the parallel branches (ControlNets plus the worker's own
encoder), measured serial-over-parallel speedup can never exceed
s + p * N.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NotFoundError, ValidationError
from .model import LatencyProfile, decoder_ms
from .orchestrator import (
    STAGES,
    STEP_SKIP,
    LatencyBreakdown,
    Policy,
    RunResult,
    Timeline,
    parallel_step_latency,
    throughput,
)

STEP_SKIP_NOTE = (
    "StepSkip trades image quality for latency; quality effects are not "
    "simulated and skipped-step results are latency-only."
)


def gustafson(s: float, p: float, n: int) -> float:
    """Scaled speedup s + p * N for serial fraction s and parallel
    fraction p over N processors."""
    if s < 0 or p < 0:
        raise ValidationError(f"fractions must be non-negative, got s={s}, p={p}")
    if abs((s + p) - 1.0) > 1e-9:
        raise ValidationError(f"s + p must equal 1 within 1e-9, got {s + p!r}")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    return s + p * n


def fractions_from_profile(profile: LatencyProfile, n_controlnets: int,
                           steps: Optional[int] = None) -> tuple[float, float]:
    """Serial/parallel fractions of a request under the offloaded
    schedule. Serial share: text encode + VAE + per-step decoder time.
    The denominator is the parallel-mode total, per the scaled-speedup
    convention, so that gustafson(s, p, n + 1) bounds the measured
    serial-over-parallel speedup."""
    profile.validate()
    if n_controlnets < 1:
        raise ValidationError(f"n_controlnets must be >= 1, got {n_controlnets}")
    if steps is None:
        steps = profile.steps_reference
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    serial_ms = profile.text_encoder_ms + profile.vae_decode_ms + steps * decoder_ms(profile)
    total_ms = (
        profile.text_encoder_ms
        + profile.vae_decode_ms
        + steps * parallel_step_latency(n_controlnets, profile)
    )
    if total_ms <= 0:
        raise ValidationError("profile yields a zero-duration request; fractions undefined")
    s = serial_ms / total_ms
    return s, 1.0 - s


def calibrate_encoder_mid_fraction(profile: LatencyProfile, n_controlnets: int = 3,
                                   steps: Optional[int] = None, target_s: float = 0.55,
                                   tol: float = 1e-12, max_iter: int = 200) -> LatencyProfile:
    """Solve for the encoder_mid_fraction that makes the serial fraction
    hit target_s, by bisection. s is strictly decreasing in the
    fraction: a larger encoder share shrinks the decoder (serial) share
    and grows the overlappable branch window."""
    if not 0 < target_s < 1:
        raise ValidationError(f"target_s must be in (0, 1), got {target_s}")
    lo, hi = 1e-9, 1.0 - 1e-9

    def s_at(f: float) -> float:
        return fractions_from_profile(profile.with_overrides(encoder_mid_fraction=f),
                                      n_controlnets, steps)[0]

    s_lo, s_hi = s_at(lo), s_at(hi)
    if not (s_hi - 1e-12 <= target_s <= s_lo + 1e-12):
        raise ValidationError(
            f"target_s={target_s} unreachable; achievable serial fraction "
            f"range is [{s_hi:.6f}, {s_lo:.6f}] for this profile"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if s_at(mid) > target_s:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    f = 0.5 * (lo + hi)
    return profile.with_overrides(encoder_mid_fraction=f)


# -- aggregation --------------------------------------------------------


def _latency_stats(values: Sequence[float]) -> dict:
    # Sorting first makes the aggregates independent of timeline order.
    arr = np.sort(np.asarray(list(values), dtype=np.float64))
    return {
        "mean": float(arr.mean()),
        "median": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr[-1]),
    }


@dataclass
class PolicyMetrics:
    policy: Policy
    label: str
    n_requests: int
    latency_ms: dict
    service_ms_mean: float
    wait_ms_mean: float
    breakdown_mean_ms: dict
    throughput_images_per_gpu_min: float
    gpu_busy_ms: dict
    cache: dict
    patch_step_histogram: dict
    notes: list = field(default_factory=list)


def _cache_dict(stats) -> dict:
    if stats is None:
        return {}
    return {
        "accesses": stats.accesses,
        "hits": stats.hits,
        "misses": stats.misses,
        "evictions": stats.evictions,
        "mib_fetched": stats.mib_fetched,
        "bytes_fetched": stats.bytes_fetched,
        "hit_rate": stats.hit_rate,
        "uncacheable": stats.uncacheable,
    }


def aggregate_run(result: RunResult) -> PolicyMetrics:
    """Collapse one policy's run into report metrics."""
    timelines, breakdowns = result.timelines, result.breakdowns
    if not timelines:
        raise ValidationError("cannot aggregate an empty run")
    e2e = [t.e2e_ms for t in timelines]
    breakdown_mean = {}
    for stage in STAGES:
        stage_values = sorted(b.stages.get(stage, 0.0) for b in breakdowns)
        breakdown_mean[stage] = float(sum(stage_values) / len(stage_values))

    # Keyed by the first fully-patched step; a value one past the run's
    # step count means the adapter never took effect.
    histogram: dict[str, int] = {}
    numeric: dict[int, int] = {}
    for b in breakdowns:
        if b.first_patched_step is not None:
            numeric[b.first_patched_step] = numeric.get(b.first_patched_step, 0) + 1
    for step in sorted(numeric):
        histogram[str(step)] = numeric[step]

    window = max((t.completion_ms for t in timelines), default=0.0)
    tput = throughput(breakdowns, max(window, 1e-9), [t.completion_ms for t in timelines])

    notes = []
    if result.policy.name == STEP_SKIP:
        notes.append(STEP_SKIP_NOTE)

    return PolicyMetrics(
        policy=result.policy,
        label=result.policy.label,
        n_requests=len(timelines),
        latency_ms=_latency_stats(e2e),
        service_ms_mean=float(sum(sorted(b.total_ms for b in breakdowns)) / len(breakdowns)),
        wait_ms_mean=float(sum(sorted(t.wait_ms for t in timelines)) / len(timelines)),
        breakdown_mean_ms=breakdown_mean,
        throughput_images_per_gpu_min=tput,
        gpu_busy_ms=dict(sorted(result.gpu_busy_ms.items())),
        cache={kind: _cache_dict(stats) for kind, stats in sorted(result.cache_stats.items())},
        patch_step_histogram=histogram,
        notes=notes,
    )


def build_report(metrics: Sequence[PolicyMetrics], baseline_label: Optional[str] = None,
                 scenario_meta: Optional[dict] = None) -> dict:
    """Assemble the cross-policy report; policies sorted by label for
    deterministic output regardless of execution order."""
    if not metrics:
        raise ValidationError("report needs at least one policy's metrics")
    by_label = {m.label: m for m in metrics}
    if len(by_label) != len(metrics):
        raise ValidationError("duplicate policy labels in one report")
    if baseline_label is None:
        baseline_label = metrics[0].label
    if baseline_label not in by_label:
        raise NotFoundError(f"baseline policy {baseline_label!r} not among {sorted(by_label)}")
    base_mean = by_label[baseline_label].latency_ms["mean"]

    policies = []
    for label in sorted(by_label):
        m = by_label[label]
        speedup = 1.0 if label == baseline_label else base_mean / m.latency_ms["mean"]
        policies.append({
            "label": m.label,
            "name": m.policy.name,
            "m_groups": m.policy.m_groups,
            "skip_steps": m.policy.skip_steps,
            "unet_optimized": m.policy.unet_optimized,
            "n_requests": m.n_requests,
            "latency_ms": m.latency_ms,
            "service_ms_mean": m.service_ms_mean,
            "wait_ms_mean": m.wait_ms_mean,
            "breakdown_mean_ms": m.breakdown_mean_ms,
            "throughput_images_per_gpu_min": m.throughput_images_per_gpu_min,
            "speedup_vs_baseline": speedup,
            "gpu_busy_ms": m.gpu_busy_ms,
            "cache": m.cache,
            "patch_step_histogram": m.patch_step_histogram,
            "notes": list(m.notes),
        })
    report = {
        "schema_version": 1,
        "baseline_policy": baseline_label,
        "policies": policies,
    }
    if scenario_meta:
        report["scenario"] = dict(scenario_meta)
    return report


def _policy_entry(report: dict, label: str) -> dict:
    for entry in report["policies"]:
        if entry["label"] == label:
            return entry
    raise NotFoundError(f"policy {label!r} not in report; present: "
                        f"{[e['label'] for e in report['policies']]}")


def compare(report: dict, policy_a: str, policy_b: str) -> dict:
    """Speedup of b over a (mean latency a / mean latency b) plus
    per-stage mean deltas (a minus b)."""
    a = _policy_entry(report, policy_a)
    b = _policy_entry(report, policy_b)
    mean_a = a["latency_ms"]["mean"]
    mean_b = b["latency_ms"]["mean"]
    if mean_b <= 0:
        raise ValidationError(f"mean latency of {policy_b!r} is not positive")
    deltas = {
        stage: a["breakdown_mean_ms"].get(stage, 0.0) - b["breakdown_mean_ms"].get(stage, 0.0)
        for stage in STAGES
    }
    return {
        "policy_a": policy_a,
        "policy_b": policy_b,
        "speedup": mean_a / mean_b,
        "throughput_ratio": (
            b["throughput_images_per_gpu_min"] / a["throughput_images_per_gpu_min"]
            if a["throughput_images_per_gpu_min"] > 0 else float("inf")
        ),
        "stage_deltas_ms": deltas,
    }
