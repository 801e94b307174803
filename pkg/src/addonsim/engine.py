"""Deterministic discrete-event kernel.

The engine knows nothing about serving: it orders events on a virtual
millisecond clock, runs their callbacks, and books FIFO resources. All
semantics live in the orchestrator. Determinism contract: given the
same schedule of callbacks, two runs produce byte-identical event logs.
Ties in time are broken by schedule order (a monotone sequence number),
never by identity or hashing.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import SimulationError, ValidationError

# Event kinds that appear in logs. Orchestrator code passes these
# strings; the engine treats them as opaque.
REQUEST_ARRIVAL = "RequestArrival"
STAGE_START = "StageStart"
STAGE_END = "StageEnd"
FETCH_COMPLETE = "FetchComplete"
PATCH_BOUNDARY = "PatchBoundary"
SYNC_ACQUIRE = "SyncAcquire"

DEFAULT_MAX_EVENTS = 10_000_000


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: str
    fn: Optional[Callable[[], None]] = None


class Simulator:
    """Event queue plus clock. Events run in (time, seq) order."""

    def __init__(self, max_events: int = DEFAULT_MAX_EVENTS):
        self.clock = 0.0
        self.max_events = max_events
        self.events_processed = 0
        self._seq = 0
        self._heap: list[tuple[float, int, Event]] = []
        self._log: list[dict] = []

    def schedule(self, time: float, kind: str, fn: Optional[Callable[[], None]] = None) -> Event:
        """Queue a callback. Scheduling into the past is an orchestrator
        bug and fails hard rather than silently reordering history."""
        if time < self.clock:
            raise SimulationError(
                f"event {kind!r} scheduled at {time} behind clock {self.clock}"
            )
        event = Event(time=time, seq=self._next_seq(), kind=kind, fn=fn)
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def emit(self, time: float, kind: str, request_id=None, resource_id=None, **extra) -> None:
        """Append a log record. Records are sorted by (time, seq) when the
        log is read back, so bookings made ahead of the clock land in
        chronological order."""
        record = {"time": time, "seq": self._next_seq(), "kind": kind,
                  "request_id": request_id, "resource_id": resource_id}
        record.update(extra)
        self._log.append(record)

    def log_records(self) -> list[dict]:
        return sorted(self._log, key=lambda r: (r["time"], r["seq"]))

    def log_ndjson(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.log_records())

    def run_until_idle(self) -> float:
        """Drain the queue; returns the final clock (0.0 if nothing ran)."""
        while self._heap:
            time, _, event = heapq.heappop(self._heap)
            self.clock = time
            self.events_processed += 1
            if self.events_processed > self.max_events:
                raise SimulationError(
                    f"event watchdog tripped after {self.max_events} events; "
                    "likely a non-terminating schedule"
                )
            if event.fn is not None:
                event.fn()
        return self.clock


@dataclass
class Resource:
    """Exclusive FIFO resource booked in call order.

    acquire() starts the activity at max(clock, busy_until), so bookings
    made by earlier events (or earlier within one event) come first;
    the resource is never idle while work is waiting.
    """

    sim: Simulator
    resource_id: str
    kind: str = "GpuCompute"
    busy_until: float = 0.0
    busy_ms: float = 0.0
    intervals: list[tuple[float, float]] = field(default_factory=list)

    def acquire(self, duration: float) -> tuple[float, float]:
        if duration < 0:
            raise ValidationError(f"acquire duration must be >= 0, got {duration!r}")
        start = max(self.sim.clock, self.busy_until)
        end = start + duration
        self.busy_until = end
        self.busy_ms += duration
        if duration > 0:
            self.intervals.append((start, end))
        return start, end
