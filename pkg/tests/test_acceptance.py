"""Acceptance gate: one test per shipped guarantee.

Each test prints exactly one ACCEPTANCE line (PASS/FAIL plus timing) so
the roster is auditable from the pytest -s output, then asserts. Every
check here recomputes its expectation independently of the library code
under test (hand formulas, brute-force replays, direct summation).
"""

import json
import math
import time
from collections import OrderedDict

import numpy as np

from addonsim.addons import AddonCatalog, LruCache
from addonsim.analysis import (
    aggregate_run,
    calibrate_encoder_mid_fraction,
    fractions_from_profile,
    gustafson,
)
from addonsim.lora import (
    BaseLayer,
    LowRankAdapter,
    create_and_replace,
    merge_in_place,
    stack_adapters,
    unmerge_in_place,
)
from addonsim.model import ClusterSpec, Request, StorageTier, get_profile
from addonsim.orchestrator import Policy, ServingSimulation
from addonsim.scenario import run_scenario
from addonsim.workload import calibrate_zipf, generate, service_a_spec, service_b_spec


def _finish(tag: str, failures: list, started: float, budget_s: float, detail: str = "") -> None:
    elapsed = time.perf_counter() - started
    reasons = list(failures)
    if elapsed > budget_s:
        reasons.append(f"runtime {elapsed:.2f}s exceeds the {budget_s:.0f}s budget")
    status = "PASS" if not reasons else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {tag}: {status}{suffix} [{elapsed:.2f}s]")
    assert not reasons, f"{tag}: " + "; ".join(reasons)


def _warm_cluster(n_gpus: int) -> ClusterSpec:
    return ClusterSpec().with_overrides(
        controlnet_gpus=n_gpus,
        prewarm_worker_controlnets=True,
        prewarm_service_controlnets=True,
    )


def _run(profile, cluster, policy_doc, catalog, requests):
    policy = Policy.parse(dict(policy_doc))
    return ServingSimulation(profile, cluster, policy, catalog, collect_log=False).run(requests)


def test_criterion_1_controlnet_microbenchmark():
    started = time.perf_counter()
    failures = []

    profile = calibrate_encoder_mid_fraction(get_profile("paper-h800-sdxl"), n_controlnets=3)
    s, p = fractions_from_profile(profile, 3)
    if abs(s - 0.55) > 0.01 or abs(p - 0.45) > 0.01:
        failures.append(f"fractions ({s:.4f}, {p:.4f}) miss (0.55, 0.45) +/- 0.01")

    catalog = AddonCatalog(controlnets={f"cn-{i}": 2500.0 for i in range(3)})
    request = Request(0, 0.0, controlnets=("cn-0", "cn-1", "cn-2"))
    cluster = _warm_cluster(3)
    serial = _run(profile, cluster, {"name": "SerialColocated"}, catalog, [request])
    offloaded = _run(profile, cluster, {"name": "CaaS"}, catalog, [request])
    speedup = serial.breakdowns[0].total_ms / offloaded.breakdowns[0].total_ms
    if abs(speedup - 2.2) > 0.1:
        failures.append(f"speedup {speedup:.4f} misses 2.2 +/- 0.1")

    bound = gustafson(0.55, 0.45, 4)
    if abs(bound - 2.35) > 1e-12:
        failures.append(f"gustafson(0.55, 0.45, 4) = {bound!r}, expected 2.35")
    if speedup > bound + 1e-9:
        failures.append(f"speedup {speedup:.6f} exceeds the {bound:.2f} bound")

    _finish("criterion 1 (microbenchmark speedup)", failures, started, 1.0,
            f"s={s:.4f} p={p:.4f} speedup={speedup:.4f} bound={bound:.2f}")


def test_criterion_2_gustafson_bound_sweep():
    started = time.perf_counter()
    failures = []
    rng = np.random.default_rng(202)
    base = get_profile("paper-h800-sdxl")

    checked = 0
    for i in range(120):
        profile = base.with_overrides(
            unet_total_ms=float(rng.uniform(1000.0, 5000.0)),
            encoder_mid_fraction=float(rng.uniform(0.1, 0.9)),
            controlnet_factor=float(rng.uniform(0.3, 2.5)),
            text_encoder_ms=float(rng.uniform(0.0, 50.0)),
            vae_decode_ms=float(rng.uniform(0.0, 400.0)),
            link_gibps=float(rng.uniform(20.0, 400.0)),
            link_latency_ms=float(rng.uniform(0.0, 5.0)),
        )
        n = int(rng.integers(1, 4))
        catalog = AddonCatalog(controlnets={f"cn-{j}": 100.0 for j in range(n)})
        request = Request(0, 0.0, controlnets=tuple(f"cn-{j}" for j in range(n)))
        cluster = _warm_cluster(n)
        serial = _run(profile, cluster, {"name": "SerialColocated"}, catalog, [request])
        offloaded = _run(profile, cluster, {"name": "CaaS"}, catalog, [request])
        speedup = serial.breakdowns[0].total_ms / offloaded.breakdowns[0].total_ms
        s, p = fractions_from_profile(profile, n)
        bound = gustafson(s, p, n + 1)
        checked += 1
        if speedup > bound + 1e-9:
            failures.append(f"profile {i} (n={n}): speedup {speedup:.6f} > bound {bound:.6f}")

    if checked < 100:
        failures.append(f"only {checked} profiles checked, need >= 100")
    _finish("criterion 2 (speedup bound property)", failures, started, 10.0,
            f"{checked} random profiles, 0 violations expected")


def test_criterion_3_lora_patch_step():
    started = time.perf_counter()
    failures = []

    profile = get_profile("paper-h800-sdxl")
    cluster = ClusterSpec().with_overrides(tier_bandwidths=(
        ("host", StorageTier(16.0, 0.5)),
        ("remote", StorageTier(1.0, 0.0)),  # the stated 1 GiB/s fetch path
    ))
    catalog = AddonCatalog(loras={"style": 456.0})
    request = Request(0, 0.0, loras=(("style", 456.0),))
    overlapped = _run(profile, cluster, {"name": "CaaS+AsyncLoRA"}, catalog, [request])
    breakdown = overlapped.breakdowns[0]

    first = breakdown.first_patched_step
    if not (first is not None and 10 <= first <= 12):
        failures.append(f"first_patched_step {first} outside [10, 12]")
    unpatched = (first - 1) / request.steps if first is not None else 1.0
    if unpatched > 0.30:
        failures.append(f"unpatched fraction {unpatched:.3f} > 0.30")

    bare = _run(profile, cluster, {"name": "NoAddon"}, catalog, [Request(1, 0.0)])
    overhead = breakdown.total_ms - bare.breakdowns[0].total_ms
    if abs(overhead - 100.0) > 1.0:
        failures.append(f"exposed overhead {overhead:.6f} ms misses 100 +/- 1")

    _finish("criterion 3 (async patch step)", failures, started, 1.0,
            f"first_patched={first} unpatched={unpatched:.2f} overhead={overhead:.2f}ms")


def test_criterion_4_serial_lora_cost():
    started = time.perf_counter()
    failures = []

    profile = get_profile("paper-h800-sdxl")
    # Tier solved so a 384 MiB transfer takes exactly the configured 490 ms.
    fetch_gibps = 384000.0 / (1024.0 * 490.0)
    cluster = ClusterSpec().with_overrides(tier_bandwidths=(
        ("host", StorageTier(16.0, 0.5)),
        ("remote", StorageTier(fetch_gibps, 0.0)),
    ))
    catalog = AddonCatalog(loras={"tune": 384.0})
    request = Request(0, 0.0, loras=(("tune", 384.0),))
    serial = _run(profile, cluster, {"name": "SerialColocated"}, catalog, [request])
    stages = serial.breakdowns[0].stages

    if abs(stages["lora_load_exposed"] - 490.0) > 1e-6:
        failures.append(f"fetch stage {stages['lora_load_exposed']!r} != 490.0")
    if abs(stages["lora_patch"] - 2000.0) > 1e-6:
        failures.append(f"patch stage {stages['lora_patch']!r} != 2000.0")
    bare = _run(profile, cluster, {"name": "NoAddon"}, catalog, [Request(1, 0.0)])
    added = serial.breakdowns[0].total_ms - bare.breakdowns[0].total_ms
    if abs(added - 2490.0) > 1e-6:
        failures.append(f"added latency {added!r} != 490 + 2000")

    _finish("criterion 4 (serial adapter cost)", failures, started, 1.0,
            f"fetch={stages['lora_load_exposed']:.1f}ms patch={stages['lora_patch']:.1f}ms")


def test_criterion_5_end_to_end_bounds():
    started = time.perf_counter()
    failures = []

    profile = calibrate_encoder_mid_fraction(get_profile("paper-h800-sdxl"), n_controlnets=3)
    cluster = ClusterSpec().with_overrides(
        controlnet_gpus=3,
        prewarm_service_controlnets=True,  # worker-side caches stay cold
    )
    catalog = AddonCatalog(
        controlnets={f"cn-{i}": 2500.0 for i in range(3)},
        loras={"lora-a": 341.0, "lora-b": 456.0},
    )
    request = Request(0, 0.0,
                      controlnets=("cn-0", "cn-1", "cn-2"),
                      loras=(("lora-a", 341.0), ("lora-b", 456.0)))

    serial = aggregate_run(_run(profile, cluster, {"name": "SerialColocated"},
                                catalog, [request]))
    fast = aggregate_run(_run(profile, cluster,
                              {"name": "CaaS+AsyncLoRA", "unet_optimized": True},
                              catalog, [request]))

    speedup = serial.latency_ms["mean"] / fast.latency_ms["mean"]
    if speedup < 4.0:
        failures.append(f"latency speedup {speedup:.4f} < 4.0")
    ratio = fast.throughput_images_per_gpu_min / serial.throughput_images_per_gpu_min
    if ratio < 1.5:
        failures.append(f"throughput ratio {ratio:.4f} < 1.5")

    _finish("criterion 5 (end-to-end bounds)", failures, started, 5.0,
            f"speedup={speedup:.4f} throughput_ratio={ratio:.4f}")


def _textbook_lru_hits(stream, capacity: float) -> int:
    resident: OrderedDict = OrderedDict()
    used = 0.0
    hits = 0
    for addon_id, size in stream:
        if addon_id in resident:
            hits += 1
            resident.move_to_end(addon_id)
            continue
        if size > capacity:
            continue
        while used + size > capacity:
            _, evicted = resident.popitem(last=False)
            used -= evicted
        resident[addon_id] = size
        used += size
    return hits


def test_criterion_6_lru_stack_property():
    started = time.perf_counter()
    failures = []
    rng = np.random.default_rng(206)

    for trace_index in range(1000):
        n_items = int(rng.integers(2, 40))
        sizes = {f"i{j}": float(rng.integers(1, 33)) for j in range(n_items)}
        ids = list(sizes)
        length = int(rng.integers(5, 200))
        stream = []
        for _ in range(length):
            addon_id = ids[int(rng.integers(0, n_items))]
            stream.append((addon_id, sizes[addon_id]))
        # Capacities at or above the largest item, so every access is
        # cacheable at every point and the inclusion theorem applies.
        floor = max(sizes.values())
        total = sum(sizes.values())
        capacities = sorted(float(rng.uniform(floor, max(total, floor + 1.0)))
                            for _ in range(4))

        previous_rate = -1.0
        for capacity in capacities:
            cache = LruCache(capacity)
            for addon_id, size in stream:
                cache.access(addon_id, size)
            expected_hits = _textbook_lru_hits(stream, capacity)
            if cache.stats.hits != expected_hits:
                failures.append(
                    f"trace {trace_index} cap {capacity:.1f}: "
                    f"{cache.stats.hits} hits, brute force says {expected_hits}"
                )
            rate = cache.stats.hit_rate
            if rate < previous_rate - 1e-12:
                failures.append(
                    f"trace {trace_index}: hit rate fell from {previous_rate} to {rate}"
                )
            previous_rate = rate
        if len(failures) > 5:
            break

    _finish("criterion 6 (LRU stack property)", failures, started, 30.0,
            "1000 random traces vs brute-force replay")


def test_criterion_7_zipf_calibration():
    started = time.perf_counter()
    failures = []

    for n_items, top, mass in ((94, 0.09, 0.95), (46, 0.11, 0.98)):
        exponent = calibrate_zipf(n_items, top, mass)
        ranks = np.arange(1, n_items + 1, dtype=np.float64)
        weights = ranks ** (-exponent)
        k = math.ceil(top * n_items)
        direct = float(weights[:k].sum() / weights.sum())
        if abs(direct - mass) > 1e-6:
            failures.append(
                f"({n_items}, {top}, {mass}): direct summation gives {direct!r}"
            )

    _finish("criterion 7 (popularity calibration)", failures, started, 1.0,
            "both service skews within 1e-6 by direct summation")


def test_criterion_8_trace_fidelity():
    started = time.perf_counter()
    failures = []

    # Target per-request add-on count distributions, held inline so the
    # comparison does not lean on the generator's own constants.
    targets = {
        "service-a": (
            service_a_spec(duration_ms=10_000_000.0, seed=8),
            {0: 0.0, 1: 0.305, 2: 0.695, 3: 0.0},
            {0: 0.002, 1: 0.088, 2: 0.91},
        ),
        "service-b": (
            service_b_spec(duration_ms=10_000_000.0, seed=8),
            {0: 0.019, 1: 0.251, 2: 0.699, 3: 0.031},
            {0: 0.072, 1: 0.736, 2: 0.192},
        ),
    }
    for name, (spec, cn_target, lora_target) in targets.items():
        trace = generate(spec)
        n = len(trace.requests)
        if n != 10_000:
            failures.append(f"{name}: generated {n} requests, expected 10000")
            continue
        for label, target, observed_counts in (
            ("controlnets", cn_target, [len(r.controlnets) for r in trace.requests]),
            ("loras", lora_target, [len(r.loras) for r in trace.requests]),
        ):
            for count, probability in target.items():
                frequency = observed_counts.count(count) / n
                if abs(frequency - probability) > 0.015:
                    failures.append(
                        f"{name} {label} count {count}: {frequency:.4f} "
                        f"vs {probability} (off by more than 1.5pp)"
                    )

    _finish("criterion 8 (trace fidelity)", failures, started, 5.0,
            "10k-request traces, every count cell within 1.5pp")


def test_criterion_9_merge_numerics():
    started = time.perf_counter()
    failures = []
    rng = np.random.default_rng(209)

    worst_round_trip = 0.0
    worst_equivalence = 0.0
    worst_linearity = 0.0
    for i in range(100):
        h1 = int(rng.integers(8, 513))
        h2 = int(rng.integers(8, 513))
        rank = int(rng.integers(1, 65))
        weight = rng.standard_normal((h1, h2)).astype(np.float32)

        def draw(adapter_id, r):
            down = (rng.standard_normal((h1, r)) / np.sqrt(r)).astype(np.float32)
            up = rng.standard_normal((r, h2)).astype(np.float32)
            return LowRankAdapter(adapter_id, down, up, scale=float(rng.uniform(0.1, 1.5)))

        adapter = draw(f"a{i}", rank)
        layer = BaseLayer(weight.copy())
        merge_in_place(layer, adapter)
        merged = layer.weight.copy()
        unmerge_in_place(layer, adapter)
        worst_round_trip = max(worst_round_trip,
                               float(np.abs(layer.weight - weight).max()))

        augmented = create_and_replace(BaseLayer(weight.copy()), adapter)
        worst_equivalence = max(worst_equivalence,
                                float(np.abs(augmented.effective_weight - merged).max()))

        second = draw(f"b{i}", int(rng.integers(1, 65)))
        sequential = BaseLayer(weight.copy())
        merge_in_place(sequential, adapter, 0.7)
        merge_in_place(sequential, second, 0.3)
        stacked = stack_adapters(f"s{i}", [(adapter, 0.7), (second, 0.3)])
        combined = BaseLayer(weight.copy())
        merge_in_place(combined, stacked)
        worst_linearity = max(worst_linearity,
                              float(np.abs(sequential.weight - combined.weight).max()))

    if worst_round_trip > 1e-5:
        failures.append(f"round-trip error {worst_round_trip!r} > 1e-5")
    if worst_equivalence > 1e-6:
        failures.append(f"route equivalence error {worst_equivalence!r} > 1e-6")
    if worst_linearity > 1e-5:
        failures.append(f"stacking linearity error {worst_linearity!r} > 1e-5")

    _finish("criterion 9 (merge numerics)", failures, started, 10.0,
            f"round_trip={worst_round_trip:.2e} equivalence={worst_equivalence:.2e} "
            f"linearity={worst_linearity:.2e}")


def _scenario_runs_identically(doc: dict, out_root, tag: str) -> list:
    first_report, first_paths = run_scenario(doc, out_dir=out_root / f"{tag}-a")
    second_report, second_paths = run_scenario(doc, out_dir=out_root / f"{tag}-b")
    failures = []
    for key in ("event_log", "report_csv", "long_csv",
                "cache_controlnet_csv", "cache_lora_csv"):
        if first_paths[key].read_bytes() != second_paths[key].read_bytes():
            failures.append(f"{tag}: {key} differs between runs")
    for report in (first_report, second_report):
        report.pop("generated_at")
    if first_report != second_report:
        failures.append(f"{tag}: reports differ beyond the timestamp")
    return failures


def test_criterion_10_determinism(tmp_path):
    started = time.perf_counter()
    failures = []

    micro = {
        "name": "acceptance-micro",
        "seed": 1,
        "profile": {"base": "paper-h800-sdxl",
                    "calibrate_serial_fraction": {"n_controlnets": 3}},
        "cluster": {"controlnet_gpus": 3, "prewarm_service_controlnets": True,
                    "prewarm_worker_controlnets": True},
        "trace": {"requests": [{"request_id": 0, "arrival_ms": 0.0,
                                "controlnets": ["cn-0", "cn-1", "cn-2"]}],
                  "controlnet_size_mib": 2500.0},
        "policies": [{"name": "SerialColocated"}, {"name": "CaaS"}],
        "baseline": "SerialColocated",
        "outputs": {"event_log": True, "figures": False},
    }
    end_to_end = {
        "name": "acceptance-e2e",
        "seed": 20,
        "profile": {"base": "paper-h800-sdxl",
                    "calibrate_serial_fraction": {"n_controlnets": 3}},
        "cluster": {"controlnet_gpus": 3, "prewarm_service_controlnets": True},
        "trace": {"spec": {"duration_ms": 20_000.0, "arrival": ["poisson", 0.8],
                           "n_controlnets": 8, "n_loras": 40}},
        "policies": [
            {"name": "SerialColocated"},
            {"name": "CaaS"},
            {"name": "CaaS+AsyncLoRA"},
            {"name": "CaaS+AsyncLoRA", "unet_optimized": True},
            {"name": "CaaS+PipelineLoRA", "m_groups": 2},
            {"name": "StepSkip", "skip_steps": 10},
            {"name": "NoAddon"},
        ],
        "baseline": "SerialColocated",
        "outputs": {"event_log": True, "figures": False},
    }
    failures += _scenario_runs_identically(micro, tmp_path, "micro")
    failures += _scenario_runs_identically(end_to_end, tmp_path, "e2e")

    _finish("criterion 10 (determinism)", failures, started, 60.0,
            "both scenarios byte-identical across reruns, timestamp aside")


def test_kernel_multiplier_arithmetic():
    started = time.perf_counter()
    failures = []

    profile = get_profile("paper-h800-sdxl")
    product = math.prod(profile.unet_opt_submultipliers)
    if abs(product - 1.2) > 0.012:  # ~1% of the composed 1.2x gain
        failures.append(f"submultipliers compose to {product!r}, expected ~1.2")
    if abs(profile.unet_opt_multiplier - 1.0 / 1.2) > 1e-12:
        failures.append(f"step multiplier {profile.unet_opt_multiplier!r} != 1/1.2")

    _finish("kernel multiplier arithmetic", failures, started, 1.0,
            f"1.064 * 1.06 * 1.072 = {product:.4f}")
