"""Deterministic discrete-event engine: tick clock, ordered queue, seeded RNG streams.

All protocol time is counted in integer ticks.  One tick is one elementary
transmission slot; its real-time duration depends on the numerology mu
(1000/2^mu microseconds, so mu=0 gives the classic 1 ms TTI).
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import PastEventError

SLOT_US_BY_MU = {0: 1000, 1: 500, 2: 250, 3: 125}


@dataclass(frozen=True, order=True)
class SimTime:
    """A point in simulation time, counted in elementary slots."""

    ticks: int
    slot_duration_us: int = 1000

    def __post_init__(self):
        if self.ticks < 0:
            raise ValueError(f"ticks must be non-negative, got {self.ticks}")
        if self.slot_duration_us not in SLOT_US_BY_MU.values():
            raise ValueError(f"slot duration {self.slot_duration_us} us is not 1000/2^mu for mu in 0..3")

    @property
    def ms(self) -> float:
        return self.ticks * self.slot_duration_us / 1000.0


class TimeBase:
    """Millisecond/tick conversion for one fixed per-run numerology."""

    def __init__(self, mu: int = 0):
        if mu not in SLOT_US_BY_MU:
            raise ValueError(f"numerology mu must be one of {sorted(SLOT_US_BY_MU)}, got {mu}")
        self.mu = mu
        self.slot_us = SLOT_US_BY_MU[mu]
        self.ticks_per_ms = 2 ** mu

    def ticks(self, ms: float) -> int:
        return int(round(ms * self.ticks_per_ms))

    def ms(self, ticks: int) -> float:
        return ticks / self.ticks_per_ms

    def time(self, ticks: int) -> SimTime:
        return SimTime(ticks, self.slot_us)


@dataclass(order=True, slots=True)
class Event:
    """A scheduled dispatch; equal fire ticks are broken by insertion sequence."""

    fire_at: int
    seq: int
    target: int = field(compare=False)
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


@dataclass
class RunSummary:
    events_dispatched: int
    final_tick: int
    dispatch_sha256: str


class Engine:
    """Single-threaded event loop over an integer tick clock.

    Instances are independent; running several engines in parallel processes
    is safe because nothing is shared.
    """

    def __init__(self, time_base: TimeBase | None = None, record_log: bool = False):
        self.tb = time_base or TimeBase(0)
        self.now = 0
        self._seq = 0
        self._heap: list[Event] = []
        self._handlers: dict[int, Callable[[Event], None]] = {}
        self._digest = hashlib.sha256()
        self._dispatched = 0
        self.log: list[tuple[int, int, int, str]] | None = [] if record_log else None

    def register(self, target: int, handler: Callable[[Event], None]) -> None:
        self._handlers[target] = handler

    def schedule(self, fire_at: int, target: int, kind: str, payload: Any = None) -> Event:
        if fire_at < self.now:
            raise PastEventError(f"cannot schedule '{kind}' at tick {fire_at}; clock is at {self.now}")
        ev = Event(fire_at, self._seq, target, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def schedule_in(self, delay: int, target: int, kind: str, payload: Any = None) -> Event:
        return self.schedule(self.now + delay, target, kind, payload)

    def run_until(self, end: int) -> RunSummary:
        """Dispatch every event with fire_at <= end in total order, then set clock to end."""
        heap = self._heap
        handlers = self._handlers
        digest = self._digest
        log = self.log
        while heap and heap[0].fire_at <= end:
            ev = heapq.heappop(heap)
            self.now = ev.fire_at
            self._dispatched += 1
            digest.update(b"%d,%d,%d,%s;" % (ev.fire_at, ev.seq, ev.target, ev.kind.encode()))
            if log is not None:
                log.append((ev.fire_at, ev.seq, ev.target, ev.kind))
            handlers[ev.target](ev)
        self.now = end
        return RunSummary(self._dispatched, end, digest.hexdigest())


def rng_stream(seed: int, stream_id: str) -> random.Random:
    """Deterministic, platform-stable RNG for one (seed, purpose) pair.

    Each (node, purpose) gets its own stream so adding a node never perturbs
    another node's draws.
    """
    digest = hashlib.sha256(f"{seed}/{stream_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))
