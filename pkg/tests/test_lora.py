"""Adapter merge numerics: exactness, round trips, and footprints."""

import tracemalloc

import numpy as np
import pytest

from addonsim.errors import ValidationError
from addonsim.lora import (
    BaseLayer,
    LowRankAdapter,
    bench_merge,
    create_and_replace,
    merge_in_place,
    stack_adapters,
    unmerge_in_place,
)


def small_adapter(scale=1.0):
    return LowRankAdapter("tiny", np.array([[1.0], [0.0]]), np.array([[0.0, 2.0]]), scale)


def random_layer_and_adapter(rng, h1, h2, rank, adapter_id="a", scale=None):
    layer = BaseLayer(rng.uniform(-1, 1, size=(h1, h2)).astype(np.float32))
    adapter = LowRankAdapter(
        adapter_id,
        rng.uniform(-1, 1, size=(h1, rank)).astype(np.float32),
        rng.uniform(-1, 1, size=(rank, h2)).astype(np.float32),
        scale=rng.uniform(0.1, 1.5) if scale is None else scale,
    )
    return layer, adapter


def test_merge_small_exact():
    layer = BaseLayer(np.eye(2, dtype=np.float32))
    merge_in_place(layer, small_adapter())
    # delta = down @ up = [[0,2],[0,0]]
    assert np.array_equal(layer.weight, np.array([[1.0, 2.0], [0.0, 1.0]], dtype=np.float32))
    assert layer.patched == [("tiny", 1.0)]


def test_merge_scale_override():
    layer = BaseLayer(np.eye(2, dtype=np.float32))
    merge_in_place(layer, small_adapter(), scale=0.5)
    assert np.array_equal(layer.weight, np.array([[1.0, 1.0], [0.0, 1.0]], dtype=np.float32))
    assert layer.patched == [("tiny", 0.5)]


def test_zero_adapter_is_identity():
    rng = np.random.default_rng(0)
    layer, _ = random_layer_and_adapter(rng, 64, 48, 4)
    before = layer.weight.copy()
    zero = LowRankAdapter("zero", np.zeros((64, 4), np.float32), np.zeros((4, 48), np.float32))
    merge_in_place(layer, zero)
    assert np.array_equal(layer.weight, before)


def test_double_merge_rejected():
    layer = BaseLayer(np.eye(2, dtype=np.float32))
    merge_in_place(layer, small_adapter())
    with pytest.raises(ValidationError, match="already merged"):
        merge_in_place(layer, small_adapter())


def test_unmerge_unknown_rejected():
    layer = BaseLayer(np.eye(2, dtype=np.float32))
    with pytest.raises(ValidationError, match="not merged"):
        unmerge_in_place(layer, small_adapter())


def test_shape_mismatch_rejected():
    layer = BaseLayer(np.zeros((4, 4), np.float32))
    bad = LowRankAdapter("bad", np.zeros((3, 2), np.float32), np.zeros((2, 4), np.float32))
    with pytest.raises(ValidationError, match="does not match layer"):
        merge_in_place(layer, bad)
    with pytest.raises(ValidationError, match="rank mismatch"):
        LowRankAdapter("worse", np.zeros((4, 2), np.float32), np.zeros((3, 4), np.float32))


def test_merge_unmerge_round_trip():
    rng = np.random.default_rng(1)
    layer, adapter = random_layer_and_adapter(rng, 300, 200, 32)
    original = layer.weight.copy()
    merge_in_place(layer, adapter)
    assert not np.array_equal(layer.weight, original)
    unmerge_in_place(layer, adapter)
    assert np.max(np.abs(layer.weight - original)) <= 1e-5
    assert layer.patched == []


def test_round_trip_any_unmerge_order():
    rng = np.random.default_rng(2)
    layer, first = random_layer_and_adapter(rng, 128, 96, 8, adapter_id="first")
    _, second = random_layer_and_adapter(rng, 128, 96, 16, adapter_id="second")
    original = layer.weight.copy()
    merge_in_place(layer, first)
    merge_in_place(layer, second)
    unmerge_in_place(layer, first)  # out of merge order on purpose
    unmerge_in_place(layer, second)
    assert np.max(np.abs(layer.weight - original)) <= 1e-5


def test_create_and_replace_matches_merge_bitwise():
    rng = np.random.default_rng(3)
    layer, adapter = random_layer_and_adapter(rng, 256, 192, 24)
    original = layer.weight.copy()
    augmented = create_and_replace(layer, adapter)
    # both routes share the accumulation path, so they agree exactly
    merge_in_place(layer, adapter)
    assert np.array_equal(augmented.effective_weight, layer.weight)
    assert np.array_equal(augmented.base_weight, original)


def test_create_and_replace_leaves_layer_untouched():
    layer = BaseLayer(np.eye(2, dtype=np.float32))
    create_and_replace(layer, small_adapter())
    assert np.array_equal(layer.weight, np.eye(2, dtype=np.float32))
    assert layer.patched == []


def test_footprint_inequality():
    rng = np.random.default_rng(4)
    layer, adapter = random_layer_and_adapter(rng, 512, 512, 32)
    augmented = create_and_replace(layer, adapter)
    # the rebuild route retains base + effective + factors; in-place keeps one weight
    assert augmented.nbytes > layer.nbytes + adapter.nbytes
    assert augmented.nbytes == 2 * layer.nbytes + adapter.nbytes


def test_stacked_adapters_equal_sequential_merges():
    rng = np.random.default_rng(5)
    layer, a = random_layer_and_adapter(rng, 200, 150, 8, adapter_id="a")
    _, b = random_layer_and_adapter(rng, 200, 150, 12, adapter_id="b")
    sequential = BaseLayer(layer.weight.copy())
    merge_in_place(sequential, a, scale=0.7)
    merge_in_place(sequential, b, scale=0.3)

    stack = stack_adapters("stack", [(a, 0.7), (b, 0.3)])
    assert stack.rank == a.rank + b.rank
    merge_in_place(layer, stack)
    assert np.max(np.abs(layer.weight - sequential.weight)) <= 1e-5


def test_stack_adapters_empty_rejected():
    with pytest.raises(ValidationError):
        stack_adapters("empty", [])


def test_merge_does_not_materialize_full_delta():
    # 1024x1024 float64 delta would be 8 MiB; block accumulation stays well under
    rng = np.random.default_rng(6)
    layer, adapter = random_layer_and_adapter(rng, 1024, 1024, 16)
    tracemalloc.start()
    merge_in_place(layer, adapter)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak < 4 * 1024 * 1024


def test_bench_merge_shape():
    result = bench_merge(h1=256, h2=256, rank=8, repeats=2, seed=0)
    assert result["merge_in_place_ms"] > 0
    assert result["create_and_replace_ms"] > 0
    assert result["in_place_nbytes"] < result["create_and_replace_nbytes"]
    assert result["h1"] == 256 and result["rank"] == 8
    with pytest.raises(ValidationError):
        bench_merge(repeats=0)
