"""Scenario files: load, validate, run, and write reports.

A scenario is a JSON document naming a latency profile, a cluster, a
workload (inline requests, a generator spec, or a trace file), and the
policies to compare over that identical workload. Outputs are a full
JSON report, flat and long-format CSVs, cache-statistics CSVs, and bar
charts rendered alongside the delimited output.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .addons import AddonCatalog, LruCache
from .analysis import aggregate_run, build_report
from .errors import ConfigError, ValidationError
from .model import ClusterSpec, LatencyProfile, Request, StorageTier, get_profile
from .orchestrator import Policy, RunResult, ServingSimulation
from .workload import Trace, TraceSpec, generate, ingest_csv

SCHEMA_VERSION = 1

DEFAULT_OUTPUTS = {
    "report_json": True,
    "report_csv": True,
    "long_csv": True,
    "cache_csv": True,
    "figures": True,
    "event_log": False,
}


def _fail(path: str, message: str) -> None:
    raise ConfigError(f"{path}: {message}")


def _check_type(value, types, path: str, label: str):
    if not isinstance(value, types):
        _fail(path, f"expected {label}, got {type(value).__name__}")
    return value


def scenario_hash(doc: dict) -> str:
    """Content hash over everything that affects results; output paths
    and toggles are excluded so re-pointing reports does not change it."""
    hashed = {k: v for k, v in doc.items() if k != "outputs"}
    blob = json.dumps(hashed, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Scenario:
    name: str
    seed: int
    profile: LatencyProfile
    cluster: ClusterSpec
    trace: Trace
    policies: list[Policy]
    baseline_label: Optional[str]
    outputs: dict
    doc: dict = field(repr=False, default_factory=dict)

    @property
    def content_hash(self) -> str:
        return scenario_hash(self.doc)


def _parse_arrival(value, path: str) -> tuple:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (str(value[0]), float(value[1]))
    if isinstance(value, dict):
        kind = value.get("kind")
        if kind == "fixed" and "interval_ms" in value:
            return ("fixed", float(value["interval_ms"]))
        if kind == "poisson" and "rate_per_s" in value:
            return ("poisson", float(value["rate_per_s"]))
    _fail(path, 'expected ["fixed", interval_ms], ["poisson", rate_per_s], '
                'or {"kind": ..., "interval_ms"/"rate_per_s": ...}')


def _parse_count_dist(value, path: str) -> tuple:
    _check_type(value, dict, path, "an object mapping count -> probability")
    dist = {}
    for key, prob in value.items():
        try:
            count = int(key)
        except (TypeError, ValueError):
            _fail(path, f"count key {key!r} is not an integer")
        dist[count] = float(prob)
    return tuple(sorted(dist.items()))


def _parse_size_dist(value, path: str) -> tuple:
    if isinstance(value, (list, tuple)) and value:
        if value[0] == "uniform" and len(value) == 3:
            return ("uniform", float(value[1]), float(value[2]))
        if value[0] == "choice" and len(value) == 2:
            pairs = tuple((float(s), float(p)) for s, p in value[1])
            return ("choice", pairs)
    _fail(path, 'expected ["uniform", low, high] or ["choice", [[size, prob], ...]]')


def _build_trace_spec(doc: dict, seed: int, path: str) -> TraceSpec:
    _check_type(doc, dict, path, "an object of trace-spec fields")
    kwargs = dict(doc)
    parsers = {
        "arrival": _parse_arrival,
        "controlnet_count_dist": _parse_count_dist,
        "lora_count_dist": _parse_count_dist,
        "lora_size_dist": _parse_size_dist,
    }
    for key, parser in parsers.items():
        if key in kwargs:
            kwargs[key] = parser(kwargs[key], f"{path}.{key}")
    kwargs.setdefault("seed", seed)
    try:
        return TraceSpec(**kwargs).validate()
    except TypeError as exc:
        _fail(path, f"unknown field ({exc})")
    except ValidationError as exc:
        _fail(path, str(exc))


def _build_profile(doc, path: str) -> LatencyProfile:
    from .analysis import calibrate_encoder_mid_fraction

    if doc is None:
        return get_profile("paper-h800-sdxl")
    _check_type(doc, dict, path, "an object")
    unknown = sorted(set(doc) - {"base", "overrides", "calibrate_serial_fraction"})
    if unknown:
        _fail(path, f"unknown field(s) {', '.join(unknown)}")
    try:
        profile = get_profile(doc.get("base", "paper-h800-sdxl"))
        overrides = doc.get("overrides") or {}
        _check_type(overrides, dict, f"{path}.overrides", "an object")
        if overrides:
            profile = profile.with_overrides(**overrides)
        calibration = doc.get("calibrate_serial_fraction")
        if calibration:
            _check_type(calibration, dict, f"{path}.calibrate_serial_fraction", "an object")
            profile = calibrate_encoder_mid_fraction(
                profile,
                n_controlnets=int(calibration.get("n_controlnets", 3)),
                steps=calibration.get("steps"),
                target_s=float(calibration.get("target_s", 0.55)),
            )
        return profile
    except (ValidationError, TypeError) as exc:
        _fail(path, str(exc))


def _build_cluster(doc, path: str) -> ClusterSpec:
    if doc is None:
        return ClusterSpec()
    _check_type(doc, dict, path, "an object")
    kwargs = dict(doc)
    if "tier_bandwidths" in kwargs:
        tiers_doc = _check_type(kwargs["tier_bandwidths"], dict,
                                f"{path}.tier_bandwidths", "an object tier -> [gibps, latency_ms]")
        tiers = []
        for name, pair in sorted(tiers_doc.items()):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                _fail(f"{path}.tier_bandwidths.{name}", "expected [gibps, latency_ms]")
            tiers.append((name, StorageTier(float(pair[0]), float(pair[1]))))
        kwargs["tier_bandwidths"] = tuple(tiers)
    if "controlnet_replicas" in kwargs:
        replica_doc = _check_type(kwargs["controlnet_replicas"], dict,
                                  f"{path}.controlnet_replicas", "an object id -> count")
        kwargs["controlnet_replicas"] = tuple(sorted((k, int(v)) for k, v in replica_doc.items()))
    try:
        return ClusterSpec().with_overrides(**kwargs)
    except ValidationError as exc:
        _fail(path, str(exc))


def _build_inline_trace(doc: dict, path: str) -> Trace:
    rows = _check_type(doc["requests"], list, f"{path}.requests", "a list of request objects")
    requests = []
    for i, row in enumerate(rows):
        row_path = f"{path}.requests[{i}]"
        _check_type(row, dict, row_path, "an object")
        try:
            requests.append(Request(
                request_id=int(row.get("request_id", i)),
                arrival_ms=float(row.get("arrival_ms", 0.0)),
                controlnets=tuple(row.get("controlnets", ())),
                loras=tuple((str(lora_id), float(size)) for lora_id, size in row.get("loras", ())),
                steps=int(row.get("steps", 50)),
            ).validate(max_controlnets=8, max_loras=8))
        except (ValidationError, TypeError, ValueError) as exc:
            _fail(row_path, str(exc))
    try:
        catalog = AddonCatalog.from_requests(requests)
        size = float(doc.get("controlnet_size_mib", 3072.0))
        for cn_id in catalog.controlnets:
            catalog.controlnets[cn_id] = size
        return Trace(requests=requests, catalog=catalog,
                     provenance={"kind": "inline"}).validate()
    except ValidationError as exc:
        _fail(path, str(exc))


def _build_trace(doc, seed: int, base_dir: Path, path: str) -> Trace:
    _check_type(doc, dict, path, 'an object with exactly one of "spec", "file", "requests"')
    sources = [key for key in ("spec", "file", "requests") if key in doc]
    if len(sources) != 1:
        _fail(path, f'expected exactly one of "spec", "file", "requests"; got {sources or "none"}')
    if "spec" in doc:
        return generate(_build_trace_spec(doc["spec"], seed, f"{path}.spec"))
    if "file" in doc:
        file_path = Path(doc["file"])
        if not file_path.is_absolute():
            file_path = base_dir / file_path
        if not file_path.exists():
            _fail(f"{path}.file", f"trace file not found: {file_path}")
        return ingest_csv(str(file_path), controlnet_size_mib=float(doc.get("controlnet_size_mib", 3072.0)))
    return _build_inline_trace(doc, path)


def load_scenario(source: Union[str, Path, dict], seed_override: Optional[int] = None) -> Scenario:
    """Parse and validate a scenario document or file. Configuration
    problems raise ConfigError naming the offending key path."""
    base_dir = Path.cwd()
    name = "scenario"
    if isinstance(source, (str, Path)):
        source_path = Path(source)
        base_dir = source_path.resolve().parent
        name = source_path.stem
        text = source_path.read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source_path}: not valid JSON ({exc})") from exc
    else:
        doc = source
    _check_type(doc, dict, "scenario", "a JSON object")

    known = {"name", "seed", "profile", "cluster", "trace", "policies", "baseline", "outputs"}
    unknown = sorted(set(doc) - known)
    if unknown:
        _fail("scenario", f"unknown field(s) {', '.join(unknown)}")
    if "trace" not in doc:
        _fail("scenario.trace", "required field is missing")
    if "policies" not in doc:
        _fail("scenario.policies", "required field is missing")

    name = str(doc.get("name", name))
    seed = seed_override if seed_override is not None else int(doc.get("seed", 0))
    if seed_override is not None:
        doc = dict(doc)
        doc["seed"] = seed_override

    profile = _build_profile(doc.get("profile"), "scenario.profile")
    cluster = _build_cluster(doc.get("cluster"), "scenario.cluster")
    trace = _build_trace(doc["trace"], seed, base_dir, "scenario.trace")

    policy_docs = _check_type(doc["policies"], list, "scenario.policies", "a list of policy objects")
    if not policy_docs:
        _fail("scenario.policies", "at least one policy is required")
    policies = []
    for i, policy_doc in enumerate(policy_docs):
        try:
            policies.append(Policy.parse(policy_doc, f"scenario.policies[{i}]"))
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
    labels = [p.label for p in policies]
    if len(set(labels)) != len(labels):
        _fail("scenario.policies", f"duplicate policy labels: {labels}")

    baseline = doc.get("baseline")
    if baseline is not None and baseline not in labels:
        _fail("scenario.baseline", f"{baseline!r} is not one of the policy labels {labels}")

    outputs = dict(DEFAULT_OUTPUTS)
    outputs_doc = doc.get("outputs") or {}
    _check_type(outputs_doc, dict, "scenario.outputs", "an object")
    unknown = sorted(set(outputs_doc) - set(DEFAULT_OUTPUTS))
    if unknown:
        _fail("scenario.outputs", f"unknown field(s) {', '.join(unknown)}")
    outputs.update(outputs_doc)

    return Scenario(
        name=name,
        seed=seed,
        profile=profile,
        cluster=cluster,
        trace=trace,
        policies=policies,
        baseline_label=baseline,
        outputs=outputs,
        doc=doc,
    )


def run_policies(scenario: Scenario, collect_log: bool = False) -> dict[str, RunResult]:
    """Execute every policy over the scenario's identical trace, each in
    a fresh simulation with cold state."""
    results: dict[str, RunResult] = {}
    for policy in scenario.policies:
        simulation = ServingSimulation(
            scenario.profile, scenario.cluster, policy,
            scenario.trace.catalog, collect_log=collect_log,
        )
        results[policy.label] = simulation.run(scenario.trace.requests)
    return results


# -- output writers ------------------------------------------------------

_CSV_STATS = ("mean", "median", "p95", "max")


def _write_report_json(report: dict, path: Path) -> None:
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_report_csv(report: dict, path: Path) -> None:
    from .orchestrator import STAGES

    header = (
        ["label", "name", "n_requests"]
        + [f"latency_{k}_ms" for k in _CSV_STATS]
        + ["service_mean_ms", "wait_mean_ms", "throughput_images_per_gpu_min", "speedup_vs_baseline"]
        + [f"stage_{stage}_ms" for stage in STAGES]
    )
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for entry in report["policies"]:
            writer.writerow(
                [entry["label"], entry["name"], entry["n_requests"]]
                + [repr(entry["latency_ms"][k]) for k in _CSV_STATS]
                + [
                    repr(entry["service_ms_mean"]),
                    repr(entry["wait_ms_mean"]),
                    repr(entry["throughput_images_per_gpu_min"]),
                    repr(entry["speedup_vs_baseline"]),
                ]
                + [repr(entry["breakdown_mean_ms"][stage]) for stage in STAGES]
            )


def _write_long_csv(report: dict, path: Path) -> None:
    from .orchestrator import STAGES

    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["policy", "metric", "value"])
        for entry in report["policies"]:
            label = entry["label"]
            writer.writerow([label, "latency_mean_ms", repr(entry["latency_ms"]["mean"])])
            writer.writerow([label, "latency_p95_ms", repr(entry["latency_ms"]["p95"])])
            writer.writerow([label, "throughput_images_per_gpu_min",
                             repr(entry["throughput_images_per_gpu_min"])])
            writer.writerow([label, "speedup_vs_baseline", repr(entry["speedup_vs_baseline"])])
            for stage in STAGES:
                writer.writerow([label, f"stage_{stage}_ms", repr(entry["breakdown_mean_ms"][stage])])


def _write_cache_csv(report: dict, kind: str, capacity_mib: float, path: Path) -> None:
    """One row per policy, in report (label-sorted) order."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["capacity_mib", "accesses", "hits", "evictions", "bytes_fetched"])
        for entry in report["policies"]:
            stats = entry["cache"].get(kind) or {}
            if not stats:
                continue
            writer.writerow([
                repr(float(capacity_mib)),
                stats["accesses"],
                stats["hits"],
                stats["evictions"],
                repr(float(stats["bytes_fetched"])),
            ])


def _write_event_log(results: dict[str, RunResult], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for label in sorted(results):
            for record in results[label].event_records:
                tagged = {"policy": label}
                tagged.update(record)
                handle.write(json.dumps(tagged, sort_keys=True) + "\n")


def run_scenario(source: Union[str, Path, dict], out_dir: Optional[Union[str, Path]] = None,
                 seed_override: Optional[int] = None,
                 collect_log: Optional[bool] = None) -> tuple[dict, dict[str, Path]]:
    """Load, simulate, aggregate, and (if out_dir is given) write every
    enabled output. Returns the report and the written-file map."""
    scenario = load_scenario(source, seed_override=seed_override)
    want_log = bool(scenario.outputs.get("event_log")) if collect_log is None else collect_log
    results = run_policies(scenario, collect_log=want_log)

    metrics = [aggregate_run(results[p.label]) for p in scenario.policies]
    meta = {
        "name": scenario.name,
        "hash": scenario.content_hash,
        "seed": scenario.seed,
        "n_requests": len(scenario.trace.requests),
        "trace_provenance": scenario.trace.provenance,
    }
    report = build_report(metrics, baseline_label=scenario.baseline_label, scenario_meta=meta)
    # Wall-clock stamp for humans; excluded from the scenario hash so
    # determinism checks can compare reports minus this field.
    report["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()

    paths: dict[str, Path] = {}
    if out_dir is None:
        return report, paths
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)

    outputs = scenario.outputs
    if outputs.get("report_json"):
        paths["report_json"] = out / "report.json"
        _write_report_json(report, paths["report_json"])
    if outputs.get("report_csv"):
        paths["report_csv"] = out / "report.csv"
        _write_report_csv(report, paths["report_csv"])
    if outputs.get("long_csv"):
        paths["long_csv"] = out / "report_long.csv"
        _write_long_csv(report, paths["long_csv"])
    if outputs.get("cache_csv"):
        paths["cache_controlnet_csv"] = out / "cache_controlnet.csv"
        _write_cache_csv(report, "controlnet", scenario.cluster.gpu_cache_mib,
                         paths["cache_controlnet_csv"])
        paths["cache_lora_csv"] = out / "cache_lora.csv"
        _write_cache_csv(report, "lora", scenario.cluster.host_cache_mib, paths["cache_lora_csv"])
    if outputs.get("event_log"):
        paths["event_log"] = out / "event_log.ndjson"
        _write_event_log(results, paths["event_log"])
    if outputs.get("figures"):
        from . import plots

        for key, figure_path in plots.render_report_figures(report, out).items():
            paths[key] = figure_path
    return report, paths


def sweep_cache(source: Union[str, Path, dict], capacities_mib: Sequence[float],
                out_dir: Optional[Union[str, Path]] = None) -> tuple[dict, dict[str, Path]]:
    """Replay the scenario's add-on access stream through one LRU cache
    per capacity, for ControlNets and LoRAs separately. Pure cache
    analysis: no simulation clock involved."""
    if not capacities_mib:
        raise ValidationError("at least one capacity is required")
    capacities = sorted(float(c) for c in capacities_mib)
    if any(c < 0 for c in capacities):
        raise ValidationError("capacities must be non-negative")
    scenario = load_scenario(source)
    trace = scenario.trace

    streams = {
        "controlnet": [(cn_id, trace.catalog.controlnets[cn_id])
                       for request in trace.requests for cn_id in request.controlnets],
        "lora": [(lora_id, size)
                 for request in trace.requests for lora_id, size in request.loras],
    }
    sweep: dict[str, list[dict]] = {}
    for kind, accesses in streams.items():
        rows = []
        for capacity in capacities:
            cache = LruCache(capacity)
            for addon_id, size in accesses:
                cache.access(addon_id, size)
            rows.append({
                "capacity_mib": capacity,
                "accesses": cache.stats.accesses,
                "hits": cache.stats.hits,
                "evictions": cache.stats.evictions,
                "bytes_fetched": cache.stats.bytes_fetched,
                "hit_rate": cache.stats.hit_rate,
            })
        sweep[kind] = rows

    result = {"scenario": scenario.name, "capacities_mib": capacities, "sweep": sweep}
    paths: dict[str, Path] = {}
    if out_dir is None:
        return result, paths
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    for kind, rows in sweep.items():
        path = out / f"cache_sweep_{kind}.csv"
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["capacity_mib", "accesses", "hits", "evictions", "bytes_fetched"])
            for row in rows:
                writer.writerow([
                    repr(row["capacity_mib"]), row["accesses"], row["hits"],
                    row["evictions"], repr(float(row["bytes_fetched"])),
                ])
        paths[f"cache_sweep_{kind}_csv"] = path
    from . import plots

    paths["hit_rate_png"] = plots.render_hit_rate_curves(
        {kind: [(row["capacity_mib"], row["hit_rate"]) for row in rows]
         for kind, rows in sweep.items()},
        out / "hit_rate.png",
    )
    return result, paths
