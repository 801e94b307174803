"""Trace generation, calibration, and CSV ingest/export.

Generated workloads follow the production traffic shape: per-request
add-on counts drawn from measured distributions, add-on ids drawn from
Zipf popularity, LoRA sizes fixed per adapter. The CSV schema is the
interchange format; a generated trace survives an export/ingest round
trip bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .addons import AddonCatalog
from .errors import TraceFormatError, ValidationError
from .model import CONTROLNET_SIZE_MIB, DEFAULT_STEPS, LORA_SIZE_RANGE_MIB, Request

TRACE_HEADER = ["request_id", "arrival_ms", "controlnet_ids", "lora_ids", "lora_sizes_mib"]
LIST_SEP = ";"

# Observed per-request add-on counts for the two production services.
SERVICE_A_CONTROLNET_COUNTS = {0: 0.0, 1: 0.305, 2: 0.695, 3: 0.0}
SERVICE_A_LORA_COUNTS = {0: 0.002, 1: 0.088, 2: 0.91}
SERVICE_B_CONTROLNET_COUNTS = {0: 0.019, 1: 0.251, 2: 0.699, 3: 0.031}
SERVICE_B_LORA_COUNTS = {0: 0.072, 1: 0.736, 2: 0.192}

# Popularity concentration: service A sees 11% of its ~46 ControlNets
# take 98% of invocations; service B sees 9% of 94 take 95%.
SERVICE_A_CONTROLNETS = 46
SERVICE_B_CONTROLNETS = 94
SERVICE_A_LORAS = 3000
SERVICE_B_LORAS = 7500

# LoRA popularity is long-tailed but far less concentrated than
# ControlNets; no published mass figure pins it, so a mild exponent.
DEFAULT_LORA_ZIPF = 0.8


def zipf_weights(n_items: int, exponent: float) -> np.ndarray:
    if n_items < 1:
        raise ValidationError(f"n_items must be >= 1, got {n_items}")
    if exponent < 0:
        raise ValidationError(f"exponent must be >= 0, got {exponent!r}")
    ranks = np.arange(1, n_items + 1, dtype=np.float64)
    weights = ranks ** (-exponent)
    return weights / weights.sum()


def zipf_top_mass(n_items: int, exponent: float, top_fraction: float) -> float:
    """Probability mass carried by the top ceil(top_fraction * n) ranks."""
    top = math.ceil(top_fraction * n_items)
    weights = zipf_weights(n_items, exponent)
    return float(weights[:top].sum())


def calibrate_zipf(n_items: int, top_fraction: float, target_mass: float,
                   tol: float = 1e-9, max_exponent: float = 64.0) -> float:
    """Find the Zipf exponent whose top-fraction ranks carry target_mass.

    Mass is monotone increasing in the exponent, so bisection suffices.
    Raises when the target is infeasible for the item count, reporting
    the achievable range.
    """
    if n_items < 1:
        raise ValidationError(f"n_items must be >= 1, got {n_items}")
    if not 0 < top_fraction <= 1:
        raise ValidationError(f"top_fraction must be in (0, 1], got {top_fraction!r}")
    if not 0 < target_mass <= 1:
        raise ValidationError(f"target_mass must be in (0, 1], got {target_mass!r}")
    lo, hi = 0.0, max_exponent
    mass_lo = zipf_top_mass(n_items, lo, top_fraction)
    mass_hi = zipf_top_mass(n_items, hi, top_fraction)
    if target_mass < mass_lo - tol or target_mass > mass_hi + tol:
        raise ValidationError(
            f"target mass {target_mass} infeasible for n_items={n_items}, "
            f"top_fraction={top_fraction}: achievable range is [{mass_lo:.6f}, {mass_hi:.6f}]"
        )
    if target_mass <= mass_lo:
        return lo
    for _ in range(200):
        mid = (lo + hi) / 2
        if zipf_top_mass(n_items, mid, top_fraction) < target_mass:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return (lo + hi) / 2


def _normalized_count_dist(dist: dict[int, float], name: str, n_ids: int, cap: int) -> list[tuple[int, float]]:
    if not dist:
        raise ValidationError(f"{name} must not be empty")
    total = 0.0
    for count, prob in dist.items():
        if count < 0:
            raise ValidationError(f"{name}: count {count} must be >= 0")
        if prob < 0:
            raise ValidationError(f"{name}: probability for count {count} must be >= 0, got {prob!r}")
        if prob > 0 and count > n_ids:
            raise ValidationError(f"{name}: count {count} exceeds the {n_ids} distinct ids available")
        if prob > 0 and count > cap:
            raise ValidationError(f"{name}: count {count} exceeds the per-request cap {cap}")
        total += prob
    if abs(total - 1.0) > 1e-9:
        raise ValidationError(f"{name} probabilities sum to {total!r}, expected 1.0")
    return sorted(dist.items())


@dataclass(frozen=True)
class TraceSpec:
    """Recipe for a synthetic trace."""

    duration_ms: float = 10_000.0
    # ("poisson", rate_per_s) or ("fixed", interval_ms)
    arrival: tuple = ("fixed", 1000.0)
    n_controlnets: int = SERVICE_B_CONTROLNETS
    n_loras: int = SERVICE_B_LORAS
    controlnet_count_dist: tuple[tuple[int, float], ...] = tuple(sorted(SERVICE_B_CONTROLNET_COUNTS.items()))
    lora_count_dist: tuple[tuple[int, float], ...] = tuple(sorted(SERVICE_B_LORA_COUNTS.items()))
    controlnet_zipf: float = 2.0
    lora_zipf: float = DEFAULT_LORA_ZIPF
    # ("uniform", low, high) or ("choice", ((size, prob), ...))
    lora_size_dist: tuple = ("uniform",) + LORA_SIZE_RANGE_MIB
    controlnet_size_mib: float = CONTROLNET_SIZE_MIB
    seed: int = 0
    workers: int = 1
    # Patch-at-boundary relies on back-to-back requests for one worker
    # being at least a second apart; generation enforces that spacing.
    min_worker_gap_ms: float = 1000.0
    max_controlnets_per_request: int = 3
    max_loras_per_request: int = 2

    def validate(self) -> "TraceSpec":
        if self.duration_ms <= 0:
            raise ValidationError(f"duration_ms must be positive, got {self.duration_ms!r}")
        if self.n_controlnets < 1 or self.n_loras < 1:
            raise ValidationError("n_controlnets and n_loras must be >= 1")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")
        if self.min_worker_gap_ms < 0:
            raise ValidationError(f"min_worker_gap_ms must be >= 0, got {self.min_worker_gap_ms!r}")
        kind = self.arrival[0] if self.arrival else None
        if kind == "poisson":
            if len(self.arrival) != 2 or not self.arrival[1] > 0:
                raise ValidationError(f"poisson arrival needs a positive rate, got {self.arrival!r}")
        elif kind == "fixed":
            if len(self.arrival) != 2 or not self.arrival[1] > 0:
                raise ValidationError(f"fixed arrival needs a positive interval, got {self.arrival!r}")
        else:
            raise ValidationError(f"unknown arrival process {self.arrival!r}")
        _normalized_count_dist(dict(self.controlnet_count_dist), "controlnet_count_dist",
                               self.n_controlnets, self.max_controlnets_per_request)
        _normalized_count_dist(dict(self.lora_count_dist), "lora_count_dist",
                               self.n_loras, self.max_loras_per_request)
        if self.controlnet_zipf < 0 or self.lora_zipf < 0:
            raise ValidationError("zipf exponents must be >= 0")
        if self.lora_size_dist[0] == "uniform":
            _, low, high = self.lora_size_dist
            if not 0 < low <= high:
                raise ValidationError(f"uniform lora_size_dist needs 0 < low <= high, got {self.lora_size_dist!r}")
        elif self.lora_size_dist[0] == "choice":
            _, pairs = self.lora_size_dist
            if not pairs or abs(sum(p for _, p in pairs) - 1.0) > 1e-9:
                raise ValidationError(f"choice lora_size_dist probabilities must sum to 1, got {self.lora_size_dist!r}")
        else:
            raise ValidationError(f"unknown lora_size_dist {self.lora_size_dist!r}")
        if self.controlnet_size_mib <= 0:
            raise ValidationError(f"controlnet_size_mib must be positive, got {self.controlnet_size_mib!r}")
        return self

    def content_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Trace:
    requests: list[Request]
    catalog: AddonCatalog
    provenance: dict = field(default_factory=dict)

    def validate(self) -> "Trace":
        last = -math.inf
        for i, request in enumerate(self.requests):
            request.validate(max_controlnets=8, max_loras=8)
            if request.arrival_ms < last:
                raise ValidationError(
                    f"trace arrivals must be non-decreasing; request index {i} "
                    f"arrives at {request.arrival_ms} after {last}"
                )
            last = request.arrival_ms
            self.catalog.check_request(request)
        return self


def _draw_from_cdf(rng: np.random.Generator, values: Sequence, cdf: np.ndarray):
    return values[int(np.searchsorted(cdf, rng.random(), side="right"))]


def _draw_distinct(rng: np.random.Generator, count: int, cdf: np.ndarray, universe: int) -> list[int]:
    """Popularity-weighted draw without replacement via rejection."""
    if count > universe:
        raise ValidationError(f"cannot draw {count} distinct ids from {universe}")
    chosen: list[int] = []
    while len(chosen) < count:
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        if idx not in chosen:
            chosen.append(idx)
    return chosen


def _arrivals(spec: TraceSpec, rng: np.random.Generator) -> list[float]:
    kind = spec.arrival[0]
    if kind == "fixed":
        interval = float(spec.arrival[1])
        return list(np.arange(0.0, spec.duration_ms, interval))
    rate_per_ms = float(spec.arrival[1]) / 1000.0
    arrivals = []
    t = rng.exponential(1.0 / rate_per_ms)
    while t < spec.duration_ms:
        arrivals.append(t)
        t += rng.exponential(1.0 / rate_per_ms)
    return arrivals


def generate(spec: TraceSpec) -> Trace:
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    cn_ids = [f"cn-{i:03d}" for i in range(spec.n_controlnets)]
    lora_ids = [f"lora-{i:05d}" for i in range(spec.n_loras)]

    # Each adapter has one fixed size; requests inherit it.
    if spec.lora_size_dist[0] == "uniform":
        _, low, high = spec.lora_size_dist
        lora_sizes = rng.uniform(low, high, size=spec.n_loras)
    else:
        _, pairs = spec.lora_size_dist
        sizes = np.array([s for s, _ in pairs])
        probs = np.array([p for _, p in pairs])
        lora_sizes = sizes[rng.choice(len(sizes), size=spec.n_loras, p=probs / probs.sum())]

    catalog = AddonCatalog(
        controlnets={cid: spec.controlnet_size_mib for cid in cn_ids},
        loras={lid: float(size) for lid, size in zip(lora_ids, lora_sizes)},
    )

    cn_cdf = np.cumsum(zipf_weights(spec.n_controlnets, spec.controlnet_zipf))
    lora_cdf = np.cumsum(zipf_weights(spec.n_loras, spec.lora_zipf))

    cn_counts, cn_probs = zip(*_normalized_count_dist(
        dict(spec.controlnet_count_dist), "controlnet_count_dist",
        spec.n_controlnets, spec.max_controlnets_per_request))
    lora_counts, lora_probs = zip(*_normalized_count_dist(
        dict(spec.lora_count_dist), "lora_count_dist",
        spec.n_loras, spec.max_loras_per_request))
    cn_count_cdf = np.cumsum(cn_probs)
    lora_count_cdf = np.cumsum(lora_probs)

    raw_arrivals = _arrivals(spec, rng)
    requests: list[Request] = []
    adjusted: list[float] = []
    for i, raw in enumerate(raw_arrivals):
        arrival = float(raw)
        if adjusted:
            arrival = max(arrival, adjusted[-1])
        if i >= spec.workers and spec.min_worker_gap_ms > 0:
            arrival = max(arrival, adjusted[i - spec.workers] + spec.min_worker_gap_ms)
        adjusted.append(arrival)

        n_cn = _draw_from_cdf(rng, cn_counts, cn_count_cdf)
        n_lora = _draw_from_cdf(rng, lora_counts, lora_count_cdf)
        req_cns = tuple(cn_ids[j] for j in _draw_distinct(rng, n_cn, cn_cdf, spec.n_controlnets))
        req_loras = tuple(
            (lora_ids[j], catalog.loras[lora_ids[j]])
            for j in _draw_distinct(rng, n_lora, lora_cdf, spec.n_loras)
        )
        requests.append(Request(
            request_id=i,
            arrival_ms=arrival,
            controlnets=req_cns,
            loras=req_loras,
            steps=DEFAULT_STEPS,
        ).validate(spec.max_controlnets_per_request, spec.max_loras_per_request))

    trace = Trace(
        requests=requests,
        catalog=catalog,
        provenance={"kind": "generated", "seed": spec.seed, "spec_hash": spec.content_hash()},
    )
    return trace.validate()


def export_csv(trace: Trace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for request in trace.requests:
            writer.writerow([
                request.request_id,
                repr(request.arrival_ms),
                LIST_SEP.join(request.controlnets),
                LIST_SEP.join(lora_id for lora_id, _ in request.loras),
                LIST_SEP.join(repr(size) for _, size in request.loras),
            ])


def _split_list(cell: str) -> list[str]:
    return cell.split(LIST_SEP) if cell else []


def ingest_csv(path: str, controlnet_size_mib: float = CONTROLNET_SIZE_MIB) -> Trace:
    problems: list[str] = []
    requests: list[Request] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file, expected header {TRACE_HEADER}")
        if header != TRACE_HEADER:
            raise TraceFormatError(
                f"{path}: line 1: bad header {header!r}, expected {TRACE_HEADER}"
            )
        last_arrival = -math.inf
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_HEADER):
                problems.append(f"line {line_no}: expected {len(TRACE_HEADER)} columns, got {len(row)}")
                continue
            try:
                request_id = int(row[0])
                arrival = float(row[1])
            except ValueError as exc:
                problems.append(f"line {line_no}: {exc}")
                continue
            cn_list = _split_list(row[2])
            lora_id_list = _split_list(row[3])
            size_list = _split_list(row[4])
            if len(lora_id_list) != len(size_list):
                problems.append(
                    f"line {line_no}: {len(lora_id_list)} lora ids but {len(size_list)} sizes"
                )
                continue
            try:
                sizes = [float(s) for s in size_list]
            except ValueError as exc:
                problems.append(f"line {line_no}: {exc}")
                continue
            if arrival < last_arrival:
                problems.append(
                    f"line {line_no}: arrival {arrival} is earlier than previous {last_arrival}"
                )
                continue
            last_arrival = arrival
            try:
                requests.append(Request(
                    request_id=request_id,
                    arrival_ms=arrival,
                    controlnets=tuple(cn_list),
                    loras=tuple(zip(lora_id_list, sizes)),
                ).validate(max_controlnets=8, max_loras=8))
            except ValidationError as exc:
                problems.append(f"line {line_no}: {exc}")
    if problems:
        shown = "; ".join(problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        raise TraceFormatError(f"{path}: {shown}{more}")

    catalog = AddonCatalog.from_requests(requests)
    for cn_id in catalog.controlnets:
        catalog.controlnets[cn_id] = controlnet_size_mib
    return Trace(
        requests=requests,
        catalog=catalog,
        provenance={"kind": "ingested", "path": str(path)},
    ).validate()


def unique_addons_per_volume(trace: Trace, shards: int) -> list[dict]:
    """Round-robin the trace across shards and count distinct add-ons
    each shard sees. More volume per shard means more distinct adapters,
    which is what makes per-worker caching ineffective at scale."""
    if shards < 1:
        raise ValidationError(f"shards must be >= 1, got {shards}")
    out = []
    for shard in range(shards):
        cns: set[str] = set()
        loras: set[str] = set()
        count = 0
        for i in range(shard, len(trace.requests), shards):
            request = trace.requests[i]
            count += 1
            cns.update(request.controlnets)
            loras.update(lora_id for lora_id, _ in request.loras)
        out.append({
            "shard": shard,
            "requests": count,
            "unique_controlnets": len(cns),
            "unique_loras": len(loras),
        })
    return out


def service_a_spec(duration_ms: float = 10_000.0, seed: int = 0, **overrides) -> TraceSpec:
    """Traffic shaped like production service A (the ControlNet-heavy one)."""
    base = TraceSpec(
        duration_ms=duration_ms,
        n_controlnets=SERVICE_A_CONTROLNETS,
        n_loras=SERVICE_A_LORAS,
        controlnet_count_dist=tuple(sorted(SERVICE_A_CONTROLNET_COUNTS.items())),
        lora_count_dist=tuple(sorted(SERVICE_A_LORA_COUNTS.items())),
        controlnet_zipf=calibrate_zipf(SERVICE_A_CONTROLNETS, 0.11, 0.98),
        seed=seed,
    )
    return replace(base, **overrides).validate() if overrides else base.validate()


def service_b_spec(duration_ms: float = 10_000.0, seed: int = 0, **overrides) -> TraceSpec:
    """Traffic shaped like production service B (broader add-on pool)."""
    base = TraceSpec(
        duration_ms=duration_ms,
        n_controlnets=SERVICE_B_CONTROLNETS,
        n_loras=SERVICE_B_LORAS,
        controlnet_count_dist=tuple(sorted(SERVICE_B_CONTROLNET_COUNTS.items())),
        lora_count_dist=tuple(sorted(SERVICE_B_LORA_COUNTS.items())),
        controlnet_zipf=calibrate_zipf(SERVICE_B_CONTROLNETS, 0.09, 0.95),
        seed=seed,
    )
    return replace(base, **overrides).validate() if overrides else base.validate()
