import heapq
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from fractalqos.lib.errors import SchedulingError

logger = logging.getLogger(__name__)


class EventKind(Enum):
    Arrival = "arrival"
    ServiceComplete = "service_complete"
    WindowBoundary = "window_boundary"
    Announcement = "announcement"
    Rebalance = "rebalance"


@dataclass
class EventRecord:
    slot: int
    kind: EventKind
    entity: str = ""
    payload: Any = None
    sequence: int = -1
    cancelled: bool = False

    def detail(self) -> str:
        if self.payload is None:
            return ""
        if isinstance(self.payload, dict):
            return ";".join(f"{k}={v}" for k, v in self.payload.items())
        return str(self.payload)


@dataclass
class SimClock:
    current_slot: int = 0
    slot_duration: float = 1.0

    def time(self) -> float:
        return self.current_slot * self.slot_duration


class Kernel:
    """Discrete-slot event queue ordered by (slot, sequence).

    Sequence numbers are assigned at scheduling time from one monotonic counter,
    so same-slot events run in the order they were scheduled.
    """

    def __init__(self, slotDuration: float = 1.0, recordEvents: bool = False):
        self.clock = SimClock(0, slotDuration)
        self.heap = []
        self.handlers: Dict[EventKind, Callable[[EventRecord], None]] = {}
        self.nextSequence = 0
        self.scheduled = 0
        self.executed = 0
        self.cancelled = 0
        self.recordEvents = recordEvents
        self.eventLog: List[tuple] = []

    @property
    def now(self) -> int:
        return self.clock.current_slot

    @property
    def pending(self) -> int:
        return self.scheduled - self.executed - self.cancelled

    def on(self, kind: EventKind, handler: Callable[[EventRecord], None]):
        self.handlers[kind] = handler

    def schedule(self, event: EventRecord) -> EventRecord:
        if event.slot < self.clock.current_slot:
            raise SchedulingError(
                f"cannot schedule {event.kind.value} at slot {event.slot}, clock is at {self.clock.current_slot}")
        event.sequence = self.nextSequence
        self.nextSequence += 1
        self.scheduled += 1
        heapq.heappush(self.heap, (event.slot, event.sequence, event))
        return event

    def scheduleAt(self, slot: int, kind: EventKind, entity: str = "", payload: Any = None) -> EventRecord:
        return self.schedule(EventRecord(slot, kind, entity, payload))

    def cancel(self, event: EventRecord):
        if event.cancelled or event.sequence < 0:
            return
        event.cancelled = True
        self.cancelled += 1

    def runUntil(self, bound: int) -> SimClock:
        """Execute every pending event with slot < bound, then advance the clock to bound."""
        if bound < self.clock.current_slot:
            raise SchedulingError(f"run_until({bound}) is behind the clock at {self.clock.current_slot}")
        while self.heap and self.heap[0][0] < bound:
            slot, _, event = heapq.heappop(self.heap)
            if event.cancelled:
                continue
            self.clock.current_slot = slot
            self.executed += 1
            if self.recordEvents:
                self.eventLog.append((slot, event.sequence, event.kind.value, event.entity, event.detail()))
            handler = self.handlers.get(event.kind)
            if handler is not None:
                handler(event)
        self.clock.current_slot = bound
        return self.clock

    def peekSlot(self) -> Optional[int]:
        return self.heap[0][0] if self.heap else None
