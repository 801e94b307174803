"""Serving policies and the per-request execution model.

A request is text encoding, a run of denoising steps, and a VAE decode.
Policies differ in where add-ons run and when their weights move:

* SerialColocated: everything on the worker GPU; ControlNets execute
  inline each step; LoRAs are fetched and patched (create-and-replace)
  before denoising. This is the naively-coupled baseline.
* CaaS: ControlNets run as services on separate GPUs, exchanging
  feature maps with the worker each step; LoRA handling as above.
* CaaS+AsyncLoRA: LoRA fetches start at request arrival on loader
  channels and overlap denoising; each adapter is merged in place at
  the first step boundary after its load completes.
* CaaS+PipelineLoRA(M): as above, but the adapter is split into M
  groups loaded back-to-back and patched group-by-group at boundaries.
* StepSkip(K): SerialColocated that runs K fewer denoising steps (a
  latency-for-quality trade; quality impact is out of scope here and
  flagged in reports).
* NoAddon: ignores add-ons entirely; the bare-pipeline reference.

The engine stays generic; every serving decision is made here.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import engine
from .addons import AddonCatalog, ChannelPool, LruCache, transfer_ms
from .engine import Resource, Simulator
from .errors import SimulationError, ValidationError
from .model import (
    ClusterSpec,
    LatencyProfile,
    Request,
    comm_ms,
    controlnet_step_ms,
    decoder_ms,
    encoder_mid_ms,
    step_duration,
)

SERIAL_COLOCATED = "SerialColocated"
CAAS = "CaaS"
CAAS_ASYNC_LORA = "CaaS+AsyncLoRA"
CAAS_PIPELINE_LORA = "CaaS+PipelineLoRA"
STEP_SKIP = "StepSkip"
NO_ADDON = "NoAddon"

POLICY_NAMES = (SERIAL_COLOCATED, CAAS, CAAS_ASYNC_LORA, CAAS_PIPELINE_LORA, STEP_SKIP, NO_ADDON)

#: Stage keys of a latency breakdown; every wall segment of a request's
#: service time is attributed to exactly one of these.
STAGES = (
    "text_encode",
    "denoise_compute",
    "controlnet_wait",
    "lora_load_exposed",
    "lora_patch",
    "cache_fetch",
    "comm",
    "vae_decode",
)


@dataclass(frozen=True)
class Policy:
    name: str
    m_groups: Optional[int] = None
    skip_steps: Optional[int] = None
    unet_optimized: bool = False

    def validate(self) -> "Policy":
        if self.name not in POLICY_NAMES:
            raise ValidationError(f"unknown policy {self.name!r}; known: {POLICY_NAMES}")
        if self.name == CAAS_PIPELINE_LORA:
            if self.m_groups is None or self.m_groups < 1:
                raise ValidationError(f"{CAAS_PIPELINE_LORA} needs m_groups >= 1, got {self.m_groups!r}")
        elif self.m_groups is not None:
            raise ValidationError(f"m_groups only applies to {CAAS_PIPELINE_LORA}")
        if self.name == STEP_SKIP:
            if self.skip_steps is None or self.skip_steps < 0:
                raise ValidationError(f"{STEP_SKIP} needs skip_steps >= 0, got {self.skip_steps!r}")
        elif self.skip_steps is not None:
            raise ValidationError(f"skip_steps only applies to {STEP_SKIP}")
        return self

    @property
    def label(self) -> str:
        label = self.name
        if self.name == CAAS_PIPELINE_LORA:
            label += f"(M={self.m_groups})"
        if self.name == STEP_SKIP:
            label += f"(K={self.skip_steps})"
        if self.unet_optimized:
            label += "+opt"
        return label

    @property
    def uses_controlnet_service(self) -> bool:
        return self.name in (CAAS, CAAS_ASYNC_LORA, CAAS_PIPELINE_LORA)

    @property
    def lora_mode(self) -> str:
        if self.name == NO_ADDON:
            return "none"
        if self.name == CAAS_ASYNC_LORA:
            return "async"
        if self.name == CAAS_PIPELINE_LORA:
            return "pipeline"
        return "blocking"

    @classmethod
    def parse(cls, doc: dict, key_path: str = "policy") -> "Policy":
        if not isinstance(doc, dict) or "name" not in doc:
            raise ValidationError(f"{key_path}: expected an object with a 'name' field, got {doc!r}")
        known = {"name", "m_groups", "skip_steps", "unet_optimized", "label"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"{key_path}: unknown field(s) {', '.join(unknown)}")
        return cls(
            name=doc["name"],
            m_groups=doc.get("m_groups"),
            skip_steps=doc.get("skip_steps"),
            unet_optimized=bool(doc.get("unet_optimized", False)),
        ).validate()


@dataclass(frozen=True)
class StepModel:
    """Per-stage durations after applying a policy to a profile."""

    text_ms: float
    encoder_ms: float
    decoder_ms: float
    controlnet_ms: float
    comm_ms: float
    vae_ms: float
    patch_inplace_ms: float
    create_replace_per_100mib: float

    @classmethod
    def from_profile(cls, profile: LatencyProfile, unet_optimized: bool = False) -> "StepModel":
        e = encoder_mid_ms(profile)
        dec = decoder_ms(profile)
        # ControlNet replicas do not benefit from UNet kernel work, so
        # their step cost is anchored to the unoptimized encoder time.
        cn = controlnet_step_ms(profile)
        if unet_optimized:
            e *= profile.unet_opt_multiplier
            dec *= profile.unet_opt_multiplier
        return cls(
            text_ms=profile.text_encoder_ms,
            encoder_ms=e,
            decoder_ms=dec,
            controlnet_ms=cn,
            comm_ms=comm_ms(profile),
            vae_ms=profile.vae_decode_ms,
            patch_inplace_ms=profile.patch_inplace_ms,
            create_replace_per_100mib=profile.patch_create_replace_ms_per_100mib,
        )

    def create_replace_ms(self, size_mib: float) -> float:
        return self.create_replace_per_100mib * size_mib / 100.0


def serial_step_latency(n_controlnets: int, profile: LatencyProfile) -> float:
    """One denoising step with n ControlNets executed inline."""
    if n_controlnets < 0:
        raise ValidationError(f"n_controlnets must be >= 0, got {n_controlnets}")
    return (
        n_controlnets * controlnet_step_ms(profile)
        + encoder_mid_ms(profile)
        + decoder_ms(profile)
    )


def parallel_step_latency(n_controlnets: int, profile: LatencyProfile) -> float:
    """One denoising step with every ControlNet on its own service GPU:
    the decoder waits on whichever finishes later, the local encoder or
    the ControlNet branch plus its feature-map transfer."""
    if n_controlnets < 1:
        raise ValidationError(f"n_controlnets must be >= 1, got {n_controlnets}")
    branch = controlnet_step_ms(profile) + comm_ms(profile)
    return max(encoder_mid_ms(profile), branch) + decoder_ms(profile)


@dataclass(frozen=True)
class GroupPatch:
    load_complete_ms: float
    boundary_step: int
    patch_end_nominal_ms: float


@dataclass(frozen=True)
class PatchPlan:
    """Where a loading adapter lands on the step grid.

    Boundaries are nominal: boundary k sits at k * step_ms after
    denoise start, uniform steps, ignoring the delays patches insert.
    first_patched_step = steps + 1 means the adapter never took effect.
    """

    load_complete_ms: float
    patch_boundary_step: Optional[int]
    first_patched_step: int
    inserted_delay_ms: float
    groups: tuple[GroupPatch, ...] = ()


def _first_boundary(constraint_ms: float, step_ms: float) -> int:
    """Smallest k >= 0 with k * step_ms >= constraint_ms, with a guard
    against float noise right at a boundary."""
    if constraint_ms <= 0:
        return 0
    k = int(math.ceil(constraint_ms / step_ms))
    while k > 0 and (k - 1) * step_ms >= constraint_ms:
        k -= 1
    while k * step_ms < constraint_ms:
        k += 1
    return k


def plan_lora_patch(load_complete_ms: float, step_ms: float, patch_ms: float, steps: int) -> PatchPlan:
    """Patch-at-boundary plan for one whole adapter. The patch occupies
    the first step boundary at or after load completion; a load that
    finishes once no steps remain never takes effect and inserts no
    delay."""
    if step_ms <= 0:
        raise ValidationError(f"step_ms must be positive, got {step_ms!r}")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if patch_ms < 0 or load_complete_ms < 0:
        raise ValidationError("patch_ms and load_complete_ms must be >= 0")
    k = _first_boundary(load_complete_ms, step_ms)
    if k >= steps:
        return PatchPlan(load_complete_ms, None, steps + 1, 0.0)
    return PatchPlan(load_complete_ms, k, k + 1, patch_ms)


def plan_pipeline_patch(group_loads_ms: Sequence[float], step_ms: float,
                        per_group_patch_ms: float, steps: int) -> PatchPlan:
    """Pipelined plan: group m patches at the first boundary at or after
    both its own load completion and the end of group m-1's patch.
    Groups that run out of steps never patch; full effect requires all
    groups, so first_patched_step reflects the last group."""
    if not group_loads_ms:
        raise ValidationError("group_loads_ms must not be empty")
    if any(b > a for a, b in zip(group_loads_ms[1:], group_loads_ms)):
        raise ValidationError("group load completions must be non-decreasing")
    if step_ms <= 0:
        raise ValidationError(f"step_ms must be positive, got {step_ms!r}")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")

    groups: list[GroupPatch] = []
    prev_patch_end = 0.0
    last_boundary = None
    for load in group_loads_ms:
        k = _first_boundary(max(load, prev_patch_end), step_ms)
        if k >= steps:
            break
        patch_end = k * step_ms + per_group_patch_ms
        groups.append(GroupPatch(load, k, patch_end))
        prev_patch_end = patch_end
        last_boundary = k

    all_patched = len(groups) == len(group_loads_ms)
    return PatchPlan(
        load_complete_ms=float(group_loads_ms[-1]),
        patch_boundary_step=last_boundary if all_patched else None,
        first_patched_step=(last_boundary + 1) if all_patched else steps + 1,
        inserted_delay_ms=per_group_patch_ms * len(groups),
        groups=tuple(groups),
    )


@dataclass
class Timeline:
    request_id: int
    policy_label: str
    worker_id: str
    arrival_ms: float
    start_ms: float
    completion_ms: float
    # (resource_id, stage, start, end, step index or None)
    activities: list[tuple] = field(default_factory=list)

    @property
    def wait_ms(self) -> float:
        return self.start_ms - self.arrival_ms

    @property
    def e2e_ms(self) -> float:
        return self.completion_ms - self.arrival_ms


@dataclass
class LatencyBreakdown:
    total_ms: float
    stages: dict[str, float]
    first_patched_step: Optional[int] = None
    gpu_ms_consumed: dict[str, float] = field(default_factory=dict)

    def check(self) -> "LatencyBreakdown":
        drift = abs(sum(self.stages.values()) - self.total_ms)
        if drift > 1e-6:
            raise SimulationError(f"breakdown stages drift from total by {drift} ms")
        return self


@dataclass
class RunResult:
    policy: Policy
    timelines: list[Timeline]
    breakdowns: list[LatencyBreakdown]
    final_clock: float
    event_records: list[dict]
    cache_stats: dict
    gpu_busy_ms: dict[str, float]


class _AdapterLoad:
    """Tracks one adapter's (possibly grouped) load and patch progress."""

    __slots__ = ("adapter_id", "ready_times", "patched_groups", "last_patch_boundary", "first_effective_step")

    def __init__(self, adapter_id: str, ready_times: list[float]):
        self.adapter_id = adapter_id
        self.ready_times = ready_times
        self.patched_groups = 0
        self.last_patch_boundary = -1
        self.first_effective_step: Optional[int] = None

    @property
    def fully_patched(self) -> bool:
        return self.patched_groups == len(self.ready_times)


class _Worker:
    def __init__(self, sim: Simulator, index: int, cluster: ClusterSpec):
        self.index = index
        self.resource_id = f"worker-{index}"
        self.sim = sim
        self.busy = False
        self.queue: deque = deque()
        self.busy_ms = 0.0
        self.controlnet_cache = LruCache(cluster.gpu_cache_mib)
        self.lora_cache = LruCache(cluster.host_cache_mib)
        self.channels = ChannelPool(cluster.loader_channels)

    def submit(self, run: "_RequestRun") -> None:
        if self.busy:
            self.queue.append(run)
        else:
            self.busy = True
            run.start_service(self.sim.clock)

    def release(self) -> None:
        if self.queue:
            self.queue.popleft().start_service(self.sim.clock)
        else:
            self.busy = False


class _ServiceGpu:
    def __init__(self, sim: Simulator, index: int, cluster: ClusterSpec):
        self.index = index
        self.resource = Resource(sim, f"cngpu-{index}", kind="GpuCompute")
        self.cache = LruCache(cluster.gpu_cache_mib)


class ServingSimulation:
    """One policy, one cluster, one stream of requests. Caches persist
    across requests within a run; separate runs share nothing."""

    def __init__(self, profile: LatencyProfile, cluster: ClusterSpec, policy: Policy,
                 catalog: AddonCatalog, max_events: int = engine.DEFAULT_MAX_EVENTS,
                 collect_log: bool = True):
        self.profile = profile.validate()
        self.cluster = cluster.validate()
        self.policy = policy.validate()
        self.catalog = catalog.validate()
        self.collect_log = collect_log
        self.sim = Simulator(max_events=max_events)
        self.steps = StepModel.from_profile(profile, policy.unet_optimized)

        if policy.uses_controlnet_service and cluster.controlnet_gpus < 1:
            raise ValidationError(f"policy {policy.label} needs controlnet_gpus >= 1")

        self.workers = [_Worker(self.sim, i, cluster) for i in range(cluster.base_workers)]
        self.service_gpus = [_ServiceGpu(self.sim, i, cluster) for i in range(cluster.controlnet_gpus)]
        self.placement = self._place_replicas()
        self._prewarm()

    def _place_replicas(self) -> dict[str, list[int]]:
        placement: dict[str, list[int]] = {}
        if not self.service_gpus:
            return placement
        counts = self.cluster.replica_counts()
        slot = 0
        for cn_id in sorted(self.catalog.controlnets):
            n = min(counts.get(cn_id, 1), len(self.service_gpus))
            gpus = []
            for _ in range(n):
                gpus.append(slot % len(self.service_gpus))
                slot += 1
            placement[cn_id] = sorted(set(gpus))
        return placement

    def _prewarm(self) -> None:
        if self.cluster.prewarm_service_controlnets:
            for cn_id in sorted(self.placement):
                for gpu_index in self.placement[cn_id]:
                    self.service_gpus[gpu_index].cache.warm(cn_id, self.catalog.controlnets[cn_id])
        if self.cluster.prewarm_worker_controlnets:
            for worker in self.workers:
                for cn_id in sorted(self.catalog.controlnets):
                    worker.controlnet_cache.warm(cn_id, self.catalog.controlnets[cn_id])

    def _emit(self, time: float, kind: str, **fields) -> None:
        if self.collect_log:
            self.sim.emit(time, kind, **fields)

    def run(self, requests: Sequence[Request]) -> RunResult:
        for request in requests:
            request.validate(max_controlnets=8, max_loras=8)
            self.catalog.check_request(request)
            if self.policy.name == STEP_SKIP and self.policy.skip_steps >= request.steps:
                raise ValidationError(
                    f"request {request.request_id}: skip_steps {self.policy.skip_steps} "
                    f"must be below steps {request.steps}"
                )
        runs = []
        for index, request in enumerate(requests):
            run = _RequestRun(self, request, self.workers[index % len(self.workers)])
            runs.append(run)
            self.sim.schedule(request.arrival_ms, engine.REQUEST_ARRIVAL, run.on_arrival)
        self.sim.run_until_idle()

        unfinished = [r.request.request_id for r in runs if r.breakdown is None]
        if unfinished:
            raise SimulationError(f"requests never completed: {unfinished}")

        cn_stats = None
        for worker in self.workers:
            cn_stats = worker.controlnet_cache.stats if cn_stats is None else cn_stats.merge(worker.controlnet_cache.stats)
        for gpu in self.service_gpus:
            cn_stats = gpu.cache.stats if cn_stats is None else cn_stats.merge(gpu.cache.stats)
        lora_stats = None
        for worker in self.workers:
            lora_stats = worker.lora_cache.stats if lora_stats is None else lora_stats.merge(worker.lora_cache.stats)

        gpu_busy = {w.resource_id: w.busy_ms for w in self.workers}
        gpu_busy.update({g.resource.resource_id: g.resource.busy_ms for g in self.service_gpus})

        return RunResult(
            policy=self.policy,
            timelines=[r.timeline for r in runs],
            breakdowns=[r.breakdown for r in runs],
            final_clock=self.sim.clock,
            event_records=self.sim.log_records() if self.collect_log else [],
            cache_stats={"controlnet": cn_stats, "lora": lora_stats},
            gpu_busy_ms=gpu_busy,
        )


class _RequestRun:
    def __init__(self, parent: ServingSimulation, request: Request, worker: _Worker):
        self.parent = parent
        self.request = request
        self.worker = worker
        self.policy = parent.policy
        self.steps = parent.steps
        self.sim = parent.sim
        self.stages = {stage: 0.0 for stage in STAGES}
        self.activities: list[tuple] = []
        self.gpu_ms: dict[str, float] = {}
        self.loads: list[_AdapterLoad] = []
        self.replica_choice: dict[str, int] = {}
        self.cn_resident: set[str] = set()
        self.start_ms: Optional[float] = None
        self.timeline: Optional[Timeline] = None
        self.breakdown: Optional[LatencyBreakdown] = None
        self.steps_to_run = request.steps
        if self.policy.name == STEP_SKIP:
            self.steps_to_run = request.steps - self.policy.skip_steps

    # -- arrival ------------------------------------------------------

    def on_arrival(self) -> None:
        now = self.sim.clock
        self.parent._emit(now, engine.REQUEST_ARRIVAL, request_id=self.request.request_id)
        if self.policy.lora_mode in ("async", "pipeline"):
            self._book_overlapped_loads(now)
        self.worker.submit(self)

    def _lora_fetch_ms(self, lora_id: str, size_mib: float) -> float:
        """Source tier depends on residency: a host-cache hit loads over
        the host link, a miss pays the remote fetch and is then staged."""
        cluster = self.parent.cluster
        hit, _ = self.worker.lora_cache.access(lora_id, size_mib)
        tier = cluster.tier("host") if hit else cluster.tier(cluster.lora_fetch_tier)
        return transfer_ms(size_mib, tier)

    def _book_overlapped_loads(self, now: float) -> None:
        groups = self.policy.m_groups if self.policy.lora_mode == "pipeline" else 1
        for lora_id, size_mib in self.request.loras:
            total_ms = self._lora_fetch_ms(lora_id, size_mib)
            if groups == 1:
                _, done = self.worker.channels.book(now, total_ms)
                ready = [done]
            else:
                # Groups of size/M move back-to-back; each group fetch
                # pays its own tier latency share via the split below.
                per_group = total_ms / groups
                ready = []
                prev = now
                for _ in range(groups):
                    _, done = self.worker.channels.book(prev, per_group)
                    ready.append(done)
                    prev = done
            for done in ready:
                self._emit(done, engine.FETCH_COMPLETE, lora_id=lora_id)
            self.loads.append(_AdapterLoad(lora_id, ready))

    def _emit(self, time: float, kind: str, **fields) -> None:
        self.parent._emit(time, kind, request_id=self.request.request_id, **fields)

    # -- service ------------------------------------------------------

    def start_service(self, t0: float) -> None:
        self.start_ms = t0
        self._emit(t0, engine.STAGE_START, resource_id=self.worker.resource_id, stage="text_encode")
        t1 = t0 + self.steps.text_ms
        self.stages["text_encode"] += self.steps.text_ms
        self.activities.append((self.worker.resource_id, "text_encode", t0, t1, None))
        self.sim.schedule(t1, engine.STAGE_END, lambda: self._after_text(t1))

    def _after_text(self, t1: float) -> None:
        self._emit(t1, engine.STAGE_END, resource_id=self.worker.resource_id, stage="text_encode")
        t = t1
        if self.policy.lora_mode == "blocking" and self.request.loras:
            t = self._blocking_lora_preamble(t)
        if not self.policy.uses_controlnet_service and self.policy.name != NO_ADDON:
            t = self._worker_controlnet_fetch(t)
        if t > self.sim.clock:
            self.sim.schedule(t, engine.STAGE_START, lambda: self._begin_denoise(t))
        else:
            self._begin_denoise(t)

    def _blocking_lora_preamble(self, t: float) -> float:
        for lora_id, size_mib in self.request.loras:
            fetch = self._lora_fetch_ms(lora_id, size_mib)
            self.activities.append((self.worker.resource_id, "lora_fetch", t, t + fetch, None))
            self.stages["lora_load_exposed"] += fetch
            t += fetch
            self._emit(t, engine.FETCH_COMPLETE, resource_id=self.worker.resource_id, lora_id=lora_id)
        for lora_id, size_mib in self.request.loras:
            patch = self.steps.create_replace_ms(size_mib)
            self.activities.append((self.worker.resource_id, "lora_patch", t, t + patch, None))
            self.stages["lora_patch"] += patch
            t += patch
            self._emit(t, engine.PATCH_BOUNDARY, resource_id=self.worker.resource_id, lora_id=lora_id, step=0)
            self.loads.append(_AdapterLoad(lora_id, [t]))
            self.loads[-1].patched_groups = 1
            self.loads[-1].first_effective_step = 1
        return t

    def _worker_controlnet_fetch(self, t: float) -> float:
        cluster = self.parent.cluster
        tier = cluster.tier(cluster.controlnet_fetch_tier)
        for cn_id in self.request.controlnets:
            size = self.parent.catalog.controlnets[cn_id]
            hit, fetch = self.worker.controlnet_cache.access(cn_id, size, tier)
            if not hit:
                self.activities.append((self.worker.resource_id, "controlnet_fetch", t, t + fetch, None))
                self.stages["cache_fetch"] += fetch
                t += fetch
                self._emit(t, engine.FETCH_COMPLETE, resource_id=self.worker.resource_id, controlnet_id=cn_id)
        return t

    def _begin_denoise(self, t: float) -> None:
        self.denoise_start = t
        t = self._apply_due_patches(t, next_step=1)
        self._start_step_at(1, t)

    def _start_step_at(self, step: int, t: float) -> None:
        # Branches fire when the worker reaches the step, so a step
        # start in the future (a patch just ran) must become an event;
        # booking service GPUs now would let branches run early.
        if t > self.sim.clock:
            self.sim.schedule(t, engine.STAGE_START, lambda: self._run_step(step, t))
        else:
            self._run_step(step, t)

    def _run_step(self, step: int, t: float) -> None:
        if self.policy.uses_controlnet_service and self.request.controlnets:
            self._run_parallel_step(step, t)
        else:
            self._run_plain_step(step, t)

    def _n_inline_controlnets(self) -> int:
        if self.policy.name == NO_ADDON or self.policy.uses_controlnet_service:
            return 0
        return len(self.request.controlnets)

    def _run_plain_step(self, step: int, t: float) -> None:
        n = self._n_inline_controlnets()
        wall = n * self.steps.controlnet_ms + self.steps.encoder_ms + self.steps.decoder_ms
        end = t + wall
        self._emit(t, engine.STAGE_START, resource_id=self.worker.resource_id, stage="denoise_step", step=step)
        self.activities.append((self.worker.resource_id, "denoise_step", t, end, step))
        self.stages["denoise_compute"] += self.steps.encoder_ms + self.steps.decoder_ms
        self.stages["controlnet_wait"] += n * self.steps.controlnet_ms
        self.sim.schedule(end, engine.STAGE_END, lambda: self._finish_step(step, end))

    def _run_parallel_step(self, step: int, t: float) -> None:
        worker_id = self.worker.resource_id
        encoder_end = t + self.steps.encoder_ms
        self._emit(t, engine.STAGE_START, resource_id=worker_id, stage="unet_encoder", step=step)
        self.activities.append((worker_id, "unet_encoder", t, encoder_end, step))

        arrivals: list[tuple[float, float]] = []  # (arrival time, fetch duration)
        for cn_id in self.request.controlnets:
            gpu = self._replica_for(cn_id)
            fetch_ms = 0.0
            if cn_id not in self.cn_resident:
                # Cache lookup happens once per request; the weights
                # stay pinned on the replica for the stream's duration.
                self.cn_resident.add(cn_id)
                size = self.parent.catalog.controlnets[cn_id]
                tier = self.parent.cluster.tier(self.parent.cluster.controlnet_fetch_tier)
                hit, fetch = gpu.cache.access(cn_id, size, tier)
                if not hit:
                    fs, fe = gpu.resource.acquire(fetch)
                    fetch_ms = fetch
                    self._account_gpu(gpu.resource.resource_id, fetch)
                    self.activities.append((gpu.resource.resource_id, "controlnet_fetch", fs, fe, step))
                    self._emit(fe, engine.FETCH_COMPLETE, resource_id=gpu.resource.resource_id, controlnet_id=cn_id)
            cs, ce = gpu.resource.acquire(self.steps.controlnet_ms)
            self._account_gpu(gpu.resource.resource_id, self.steps.controlnet_ms)
            self.activities.append((gpu.resource.resource_id, "controlnet_step", cs, ce, step))
            arrival = ce + self.steps.comm_ms
            self._emit(arrival, engine.STAGE_END, resource_id=gpu.resource.resource_id,
                       stage="controlnet_output", step=step, controlnet_id=cn_id)
            arrivals.append((arrival, fetch_ms))

        last_arrival = max((a for a, _ in arrivals), default=encoder_end)
        decoder_start = max(encoder_end, last_arrival)
        self._emit(decoder_start, engine.SYNC_ACQUIRE, resource_id=worker_id, step=step,
                   sync_wait_ms=decoder_start - encoder_end)
        decoder_end = decoder_start + self.steps.decoder_ms
        self.activities.append((worker_id, "unet_decoder", decoder_start, decoder_end, step))
        self.stages["denoise_compute"] += self.steps.encoder_ms + self.steps.decoder_ms
        self._attribute_stall(decoder_start - encoder_end, arrivals)
        self.sim.schedule(decoder_end, engine.STAGE_END, lambda: self._finish_step(step, decoder_end))

    def _attribute_stall(self, gap: float, arrivals: list[tuple[float, float]]) -> None:
        """Split decoder stall time along the critical branch, back to
        front: transfer tail, branch compute, weight fetch, then
        whatever remains was queueing for the service GPU."""
        if gap <= 0 or not arrivals:
            return
        critical = max(range(len(arrivals)), key=lambda i: arrivals[i][0])
        _, fetch_ms = arrivals[critical]
        comm_part = min(gap, self.steps.comm_ms)
        rest = gap - comm_part
        compute_part = min(rest, self.steps.controlnet_ms)
        rest -= compute_part
        fetch_part = min(rest, fetch_ms)
        queue_part = rest - fetch_part
        self.stages["comm"] += comm_part
        self.stages["controlnet_wait"] += compute_part + queue_part
        self.stages["cache_fetch"] += fetch_part

    def _replica_for(self, cn_id: str) -> _ServiceGpu:
        if cn_id in self.replica_choice:
            return self.parent.service_gpus[self.replica_choice[cn_id]]
        candidates = self.parent.placement.get(cn_id) or range(len(self.parent.service_gpus))
        chosen = min(candidates, key=lambda i: (self.parent.service_gpus[i].resource.busy_until, i))
        self.replica_choice[cn_id] = chosen
        return self.parent.service_gpus[chosen]

    def _account_gpu(self, resource_id: str, duration: float) -> None:
        self.gpu_ms[resource_id] = self.gpu_ms.get(resource_id, 0.0) + duration

    def _finish_step(self, step: int, t: float) -> None:
        if step < self.steps_to_run:
            t = self._apply_due_patches(t, next_step=step + 1)
            self._start_step_at(step + 1, t)
        else:
            self._run_vae(t)

    def _apply_due_patches(self, t: float, next_step: int) -> float:
        if self.policy.lora_mode not in ("async", "pipeline"):
            return t
        boundary = next_step - 1
        for load in self.loads:
            if load.fully_patched:
                continue
            if self.policy.lora_mode == "pipeline" and load.last_patch_boundary == boundary:
                continue
            ready = load.ready_times[load.patched_groups]
            if ready <= t + 1e-9:
                patch = self.steps.patch_inplace_ms
                self.activities.append((self.worker.resource_id, "lora_patch", t, t + patch, boundary))
                self.stages["lora_patch"] += patch
                t += patch
                load.patched_groups += 1
                load.last_patch_boundary = boundary
                self._emit(t, engine.PATCH_BOUNDARY, resource_id=self.worker.resource_id,
                           lora_id=load.adapter_id, step=boundary)
                if load.fully_patched:
                    load.first_effective_step = next_step
        return t

    def _run_vae(self, t: float) -> None:
        end = t + self.steps.vae_ms
        self._emit(t, engine.STAGE_START, resource_id=self.worker.resource_id, stage="vae_decode")
        self.activities.append((self.worker.resource_id, "vae_decode", t, end, None))
        self.stages["vae_decode"] += self.steps.vae_ms
        self.sim.schedule(end, engine.STAGE_END, lambda: self._complete(end))

    def _complete(self, t_end: float) -> None:
        self._emit(t_end, engine.STAGE_END, resource_id=self.worker.resource_id, stage="request_done")
        total = t_end - self.start_ms
        self.worker.busy_ms += total
        self._account_gpu(self.worker.resource_id, total)

        first_patched = None
        if self.request.loras and self.policy.lora_mode != "none":
            first_patched = max(
                load.first_effective_step if load.first_effective_step is not None else self.steps_to_run + 1
                for load in self.loads
            )
        self.timeline = Timeline(
            request_id=self.request.request_id,
            policy_label=self.policy.label,
            worker_id=self.worker.resource_id,
            arrival_ms=self.request.arrival_ms,
            start_ms=self.start_ms,
            completion_ms=t_end,
            activities=self.activities,
        )
        self.breakdown = LatencyBreakdown(
            total_ms=total,
            stages=dict(self.stages),
            first_patched_step=first_patched,
            gpu_ms_consumed=dict(self.gpu_ms),
        ).check()
        self.worker.release()


def execute(request: Request, policy: Policy, cluster: ClusterSpec, profile: LatencyProfile,
            catalog: Optional[AddonCatalog] = None) -> tuple[Timeline, LatencyBreakdown]:
    """Run one request through an otherwise idle cluster."""
    if catalog is None:
        catalog = AddonCatalog.from_requests([request])
    simulation = ServingSimulation(profile, cluster, policy, catalog)
    result = simulation.run([request])
    return result.timelines[0], result.breakdowns[0]


def throughput(breakdowns: Sequence[LatencyBreakdown], window_ms: float,
               completions_ms: Optional[Sequence[float]] = None) -> float:
    """Images per GPU-minute: completed images over total GPU time
    consumed, in minutes. The window must cover every completion; it
    documents the observation span rather than entering the ratio."""
    if window_ms <= 0:
        raise ValidationError(f"window_ms must be positive, got {window_ms!r}")
    if completions_ms is not None and completions_ms:
        latest = max(completions_ms)
        if latest > window_ms + 1e-9:
            raise ValidationError(f"window_ms {window_ms} does not cover latest completion {latest}")
    busy = sum(sum(b.gpu_ms_consumed.values()) for b in breakdowns)
    if busy <= 0:
        raise ValidationError("no GPU time consumed; throughput undefined")
    return len(breakdowns) / (busy / 60_000.0)
