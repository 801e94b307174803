"""Low-rank adapter patching numerics.

Two patching strategies with very different costs but identical math:

* merge_in_place folds scale * down @ up into the base weight without
  ever materializing the full-rank product; work proceeds over row
  blocks with a constant-height buffer, accumulated in float64 and
  rounded into the float32 weights once per element.
* create_and_replace emulates the rebuild-the-layer route: it allocates
  a new layer holding copies of the base weight and the adapter factors
  plus the materialized effective weight.

Both routes share the accumulation helper, so their results agree
exactly; what differs is allocation and wall time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError

BLOCK_ROWS = 128


@dataclass
class LowRankAdapter:
    """Factors for one adapter: weight delta = scale * down @ up."""

    adapter_id: str
    down: np.ndarray  # (h1, rank) float32
    up: np.ndarray    # (rank, h2) float32
    scale: float = 1.0

    def __post_init__(self):
        self.down = np.asarray(self.down, dtype=np.float32)
        self.up = np.asarray(self.up, dtype=np.float32)
        if self.down.ndim != 2 or self.up.ndim != 2:
            raise ValidationError(f"adapter {self.adapter_id!r}: factors must be 2-d")
        if self.down.shape[1] != self.up.shape[0]:
            raise ValidationError(
                f"adapter {self.adapter_id!r}: rank mismatch, down is {self.down.shape}, up is {self.up.shape}"
            )

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @property
    def nbytes(self) -> int:
        return self.down.nbytes + self.up.nbytes


@dataclass
class BaseLayer:
    """A dense layer with its currently merged adapters."""

    weight: np.ndarray  # (h1, h2) float32, mutated in place by merges
    patched: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        if self.weight.ndim != 2:
            raise ValidationError("layer weight must be 2-d")

    @property
    def nbytes(self) -> int:
        return self.weight.nbytes


def _check_shapes(layer_weight: np.ndarray, adapter: LowRankAdapter) -> None:
    h1, h2 = layer_weight.shape
    if adapter.down.shape[0] != h1 or adapter.up.shape[1] != h2:
        raise ValidationError(
            f"adapter {adapter.adapter_id!r} shape ({adapter.down.shape[0]}, {adapter.up.shape[1]}) "
            f"does not match layer ({h1}, {h2})"
        )


def _accumulate(weight: np.ndarray, adapter: LowRankAdapter, scale: float, sign: float) -> None:
    # Row-block accumulation: the only temporary is one block of the
    # product, never the full h1 x h2 delta. float64 accumulation keeps
    # merge/unmerge round trips at single-rounding error.
    up64 = adapter.up.astype(np.float64)
    h1 = weight.shape[0]
    for row in range(0, h1, BLOCK_ROWS):
        stop = min(row + BLOCK_ROWS, h1)
        block = adapter.down[row:stop].astype(np.float64) @ up64
        acc = weight[row:stop].astype(np.float64)
        acc += (sign * scale) * block
        weight[row:stop] = acc.astype(np.float32)


def merge_in_place(layer: BaseLayer, adapter: LowRankAdapter, scale: Optional[float] = None) -> None:
    _check_shapes(layer.weight, adapter)
    if any(existing_id == adapter.adapter_id for existing_id, _ in layer.patched):
        raise ValidationError(f"adapter {adapter.adapter_id!r} is already merged into this layer")
    effective_scale = adapter.scale if scale is None else scale
    _accumulate(layer.weight, adapter, effective_scale, sign=1.0)
    layer.patched.append((adapter.adapter_id, effective_scale))


def unmerge_in_place(layer: BaseLayer, adapter: LowRankAdapter) -> None:
    _check_shapes(layer.weight, adapter)
    for i, (existing_id, scale) in enumerate(layer.patched):
        if existing_id == adapter.adapter_id:
            _accumulate(layer.weight, adapter, scale, sign=-1.0)
            del layer.patched[i]
            return
    raise ValidationError(f"adapter {adapter.adapter_id!r} is not merged into this layer")


@dataclass
class AugmentedLayer:
    """Result of the create-and-replace route: the original weight and
    the adapter factors are all retained alongside the effective weight."""

    base_weight: np.ndarray
    effective_weight: np.ndarray
    adapters: list[tuple[LowRankAdapter, float]]

    @property
    def nbytes(self) -> int:
        retained = sum(a.nbytes for a, _ in self.adapters)
        return self.base_weight.nbytes + self.effective_weight.nbytes + retained


def create_and_replace(layer: BaseLayer, adapter: LowRankAdapter, scale: Optional[float] = None) -> AugmentedLayer:
    """Build a replacement layer instead of touching the original."""
    _check_shapes(layer.weight, adapter)
    effective_scale = adapter.scale if scale is None else scale
    base_copy = layer.weight.copy()
    effective = layer.weight.copy()
    _accumulate(effective, adapter, effective_scale, sign=1.0)
    kept = LowRankAdapter(adapter.adapter_id, adapter.down.copy(), adapter.up.copy(), adapter.scale)
    return AugmentedLayer(
        base_weight=base_copy,
        effective_weight=effective,
        adapters=[(kept, effective_scale)],
    )


def stack_adapters(adapter_id: str, adapters: list[tuple[LowRankAdapter, float]]) -> LowRankAdapter:
    """Concatenate adapters into one wide adapter. Merging the stack
    equals merging each adapter in sequence (up to rounding); used to
    check that multi-adapter patching is linear."""
    if not adapters:
        raise ValidationError("stack_adapters needs at least one adapter")
    downs = [a.down * np.float32(s) for a, s in adapters]
    ups = [a.up for a, _ in adapters]
    return LowRankAdapter(
        adapter_id,
        np.concatenate(downs, axis=1),
        np.concatenate(ups, axis=0),
        scale=1.0,
    )


def bench_merge(h1: int = 2048, h2: int = 2048, rank: int = 64,
                repeats: int = 5, seed: int = 0) -> dict:
    """Median wall time of each patching route on one random layer."""
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    weight = rng.uniform(-1, 1, size=(h1, h2)).astype(np.float32)
    adapter = LowRankAdapter(
        "bench",
        rng.uniform(-1, 1, size=(h1, rank)).astype(np.float32),
        rng.uniform(-1, 1, size=(rank, h2)).astype(np.float32),
    )

    in_place_times = []
    for _ in range(repeats):
        layer = BaseLayer(weight.copy())
        t0 = time.perf_counter()
        merge_in_place(layer, adapter)
        in_place_times.append((time.perf_counter() - t0) * 1000.0)

    create_times = []
    for _ in range(repeats):
        layer = BaseLayer(weight.copy())
        t0 = time.perf_counter()
        create_and_replace(layer, adapter)
        create_times.append((time.perf_counter() - t0) * 1000.0)

    in_place_layer = BaseLayer(weight.copy())
    merge_in_place(in_place_layer, adapter)
    augmented = create_and_replace(BaseLayer(weight.copy()), adapter)
    return {
        "h1": h1, "h2": h2, "rank": rank, "repeats": repeats,
        "merge_in_place_ms": float(np.median(in_place_times)),
        "create_and_replace_ms": float(np.median(create_times)),
        "in_place_nbytes": in_place_layer.nbytes,
        "create_and_replace_nbytes": augmented.nbytes,
    }
