"""Add-on weight store: catalog, LRU residency, tiered fetch timing.

ControlNet and LoRA weights live in per-GPU or per-worker LRU caches
and are fetched from a storage tier on miss. Fetch time is pure
arithmetic (latency + size over bandwidth); concurrency comes from the
loader-channel pool, which books fetches onto the earliest-free channel.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import NotFoundError, ValidationError
from .model import CONTROLNET_SIZE_MIB, MIB_PER_GIB, Request, StorageTier

BYTES_PER_MIB = 1024.0 * 1024.0


def transfer_ms(size_mib: float, tier: StorageTier) -> float:
    """Wall time to move size_mib from a tier: fixed latency plus
    size over bandwidth. Size zero still pays the latency."""
    if size_mib < 0:
        raise ValidationError(f"size_mib must be >= 0, got {size_mib!r}")
    tier.validate()
    return tier.latency_ms + size_mib / (tier.gibps * MIB_PER_GIB) * 1000.0


@dataclass
class CacheStats:
    accesses: int = 0
    hits: int = 0
    evictions: int = 0
    mib_fetched: float = 0.0
    uncacheable: int = 0

    @property
    def misses(self) -> int:
        return self.accesses - self.hits

    @property
    def bytes_fetched(self) -> float:
        return self.mib_fetched * BYTES_PER_MIB

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def merge(self, other: "CacheStats") -> "CacheStats":
        return CacheStats(
            accesses=self.accesses + other.accesses,
            hits=self.hits + other.hits,
            evictions=self.evictions + other.evictions,
            mib_fetched=self.mib_fetched + other.mib_fetched,
            uncacheable=self.uncacheable + other.uncacheable,
        )


class LruCache:
    """Size-aware LRU over add-on ids.

    Items larger than the whole capacity are uncacheable: they are
    fetched on every access, never made resident, and flagged in the
    stats. Note that uncacheable items are what breaks hit-rate
    monotonicity across capacities; for items that fit everywhere the
    resident set at capacity C is always a subset of the set at C' > C.
    """

    def __init__(self, capacity_mib: float):
        if capacity_mib < 0:
            raise ValidationError(f"capacity_mib must be >= 0, got {capacity_mib!r}")
        self.capacity_mib = capacity_mib
        self.used_mib = 0.0
        self.stats = CacheStats()
        self._resident: OrderedDict[str, float] = OrderedDict()

    def __contains__(self, addon_id: str) -> bool:
        return addon_id in self._resident

    def resident_ids(self) -> list[str]:
        return list(self._resident)

    def access(self, addon_id: str, size_mib: float, tier: Optional[StorageTier] = None) -> tuple[bool, float]:
        """Touch an add-on; returns (hit, fetch_ms). fetch_ms is 0 on a
        hit, otherwise the tier transfer time (0 when no tier given)."""
        if size_mib <= 0:
            raise ValidationError(f"size_mib must be positive, got {size_mib!r}")
        self.stats.accesses += 1
        if addon_id in self._resident:
            self._resident.move_to_end(addon_id)
            self.stats.hits += 1
            return True, 0.0
        fetch = transfer_ms(size_mib, tier) if tier is not None else 0.0
        self.stats.mib_fetched += size_mib
        if size_mib > self.capacity_mib:
            self.stats.uncacheable += 1
            return False, fetch
        while self.used_mib + size_mib > self.capacity_mib:
            _, evicted_size = self._resident.popitem(last=False)
            self.used_mib -= evicted_size
            self.stats.evictions += 1
        self._resident[addon_id] = size_mib
        self.used_mib += size_mib
        return False, fetch

    def warm(self, addon_id: str, size_mib: float) -> None:
        """Pre-populate without touching stats. Evicts as needed; an
        item beyond the whole capacity is a configuration mistake."""
        if size_mib > self.capacity_mib:
            raise ValidationError(
                f"cannot prewarm {addon_id!r}: size {size_mib} exceeds capacity {self.capacity_mib}"
            )
        if addon_id in self._resident:
            self._resident.move_to_end(addon_id)
            return
        while self.used_mib + size_mib > self.capacity_mib:
            _, evicted_size = self._resident.popitem(last=False)
            self.used_mib -= evicted_size
        self._resident[addon_id] = size_mib
        self.used_mib += size_mib


def hit_rate_curve(
    accesses: Sequence[tuple[str, float]], capacities_mib: Sequence[float]
) -> list[tuple[float, float]]:
    """Replay one access stream through a fresh LRU per capacity."""
    if not accesses:
        warnings.warn("hit_rate_curve: empty access stream, returning empty curve")
        return []
    curve = []
    for capacity in capacities_mib:
        cache = LruCache(capacity)
        for addon_id, size in accesses:
            cache.access(addon_id, size)
        curve.append((capacity, cache.stats.hit_rate))
    return curve


class ChannelPool:
    """Fixed set of loader channels; each booking takes the channel that
    frees up first (lowest index on ties), starting no earlier than the
    requested time. Bookings must be made in non-decreasing event time."""

    def __init__(self, channels: int):
        if channels < 1:
            raise ValidationError(f"channels must be >= 1, got {channels}")
        self.free_at = [0.0] * channels
        self.busy_ms = 0.0

    def book(self, at: float, duration: float) -> tuple[float, float]:
        if duration < 0:
            raise ValidationError(f"duration must be >= 0, got {duration!r}")
        index = min(range(len(self.free_at)), key=lambda i: (self.free_at[i], i))
        start = max(at, self.free_at[index])
        end = start + duration
        self.free_at[index] = end
        self.busy_ms += duration
        return start, end

    def fetch(self, size_mib: float, tier: StorageTier, at: float = 0.0) -> tuple[float, float]:
        return self.book(at, transfer_ms(size_mib, tier))


@dataclass
class AddonCatalog:
    """Known add-ons and their sizes in MiB."""

    controlnets: dict[str, float] = field(default_factory=dict)
    loras: dict[str, float] = field(default_factory=dict)

    def validate(self) -> "AddonCatalog":
        for group_name, group in (("controlnets", self.controlnets), ("loras", self.loras)):
            for addon_id, size in group.items():
                if size <= 0:
                    raise ValidationError(f"{group_name}[{addon_id!r}] size must be positive, got {size!r}")
        return self

    def controlnet_size(self, cn_id: str) -> float:
        if cn_id not in self.controlnets:
            raise NotFoundError(f"unknown controlnet id {cn_id!r}")
        return self.controlnets[cn_id]

    def lora_size(self, lora_id: str) -> float:
        if lora_id not in self.loras:
            raise NotFoundError(f"unknown lora id {lora_id!r}")
        return self.loras[lora_id]

    def check_request(self, request: Request) -> None:
        missing = [cn for cn in request.controlnets if cn not in self.controlnets]
        missing += [lora_id for lora_id, _ in request.loras if lora_id not in self.loras]
        if missing:
            raise NotFoundError(
                f"request {request.request_id} references unknown add-on id(s): {', '.join(missing)}"
            )

    @classmethod
    def from_requests(cls, requests: Iterable[Request]) -> "AddonCatalog":
        """Permissive catalog covering exactly the ids a trace uses.
        ControlNets get the default weight size; LoRA sizes come from
        the requests themselves (conflicting sizes are rejected)."""
        catalog = cls()
        for request in requests:
            for cn_id in request.controlnets:
                catalog.controlnets.setdefault(cn_id, CONTROLNET_SIZE_MIB)
            for lora_id, size in request.loras:
                known = catalog.loras.get(lora_id)
                if known is not None and known != size:
                    raise ValidationError(
                        f"lora {lora_id!r} appears with conflicting sizes {known} and {size}"
                    )
                catalog.loras[lora_id] = size
        return catalog.validate()
