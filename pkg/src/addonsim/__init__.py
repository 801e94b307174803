"""Deterministic discrete-event simulator for text-to-image diffusion
serving with add-on modules (ControlNets and LoRAs): serving policies,
add-on caching and loading, workload synthesis, speedup analysis, and
adapter-patching numerics."""

from .addons import AddonCatalog, CacheStats, ChannelPool, LruCache, hit_rate_curve, transfer_ms
from .analysis import (
    aggregate_run,
    build_report,
    calibrate_encoder_mid_fraction,
    compare,
    fractions_from_profile,
    gustafson,
)
from .engine import Resource, Simulator
from .errors import (
    AddonSimError,
    ConfigError,
    NotFoundError,
    SimulationError,
    TraceFormatError,
    ValidationError,
)
from .lora import (
    AugmentedLayer,
    BaseLayer,
    LowRankAdapter,
    bench_merge,
    create_and_replace,
    merge_in_place,
    stack_adapters,
    unmerge_in_place,
)
from .model import (
    ClusterSpec,
    LatencyProfile,
    Request,
    StorageTier,
    comm_ms,
    controlnet_step_ms,
    decoder_ms,
    default_tiers,
    encoder_mid_ms,
    get_profile,
    step_duration,
)
from .orchestrator import (
    CAAS,
    CAAS_ASYNC_LORA,
    CAAS_PIPELINE_LORA,
    NO_ADDON,
    POLICY_NAMES,
    SERIAL_COLOCATED,
    STAGES,
    STEP_SKIP,
    LatencyBreakdown,
    PatchPlan,
    Policy,
    RunResult,
    ServingSimulation,
    StepModel,
    Timeline,
    execute,
    parallel_step_latency,
    plan_lora_patch,
    plan_pipeline_patch,
    serial_step_latency,
    throughput,
)
from .scenario import Scenario, load_scenario, run_scenario, scenario_hash, sweep_cache
from .workload import (
    Trace,
    TraceSpec,
    calibrate_zipf,
    export_csv,
    generate,
    ingest_csv,
    service_a_spec,
    service_b_spec,
    unique_addons_per_volume,
    zipf_top_mass,
    zipf_weights,
)

__version__ = "0.1.0"

__all__ = [
    "AddonCatalog", "CacheStats", "ChannelPool", "LruCache", "hit_rate_curve", "transfer_ms",
    "aggregate_run", "build_report", "calibrate_encoder_mid_fraction", "compare",
    "fractions_from_profile", "gustafson",
    "Resource", "Simulator",
    "AddonSimError", "ConfigError", "NotFoundError", "SimulationError",
    "TraceFormatError", "ValidationError",
    "AugmentedLayer", "BaseLayer", "LowRankAdapter", "bench_merge", "create_and_replace",
    "merge_in_place", "stack_adapters", "unmerge_in_place",
    "ClusterSpec", "LatencyProfile", "Request", "StorageTier", "comm_ms",
    "controlnet_step_ms", "decoder_ms", "default_tiers", "encoder_mid_ms",
    "get_profile", "step_duration",
    "CAAS", "CAAS_ASYNC_LORA", "CAAS_PIPELINE_LORA", "NO_ADDON", "POLICY_NAMES",
    "SERIAL_COLOCATED", "STAGES", "STEP_SKIP",
    "LatencyBreakdown", "PatchPlan", "Policy", "RunResult", "ServingSimulation",
    "StepModel", "Timeline", "execute", "parallel_step_latency", "plan_lora_patch",
    "plan_pipeline_patch", "serial_step_latency", "throughput",
    "Scenario", "load_scenario", "run_scenario", "scenario_hash", "sweep_cache",
    "Trace", "TraceSpec", "calibrate_zipf", "export_csv", "generate", "ingest_csv",
    "service_a_spec", "service_b_spec", "unique_addons_per_volume",
    "zipf_top_mass", "zipf_weights",
    "__version__",
]
