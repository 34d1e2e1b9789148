import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Hashable, List, Optional, Tuple

import numpy as np

from fractalqos.lib.errors import ConfigError, LedgerError, ReleaseError

logger = logging.getLogger(__name__)

DEFAULT_P_EJECT = 1.0
# packet lifetime in multiples of the class delay bound
LIFETIME_FACTOR = 4
RESOURCE_TOLERANCE = 1e-9


class Outcome(Enum):
    Queued = "queued"
    EjectedOther = "ejected_other"
    Dropped = "dropped"


@dataclass(frozen=True)
class ResourceVector:
    cpu: float = 0.0
    net: float = 0.0
    ram: float = 0.0

    def __post_init__(self):
        if min(self.cpu, self.net, self.ram) < 0:
            raise ValueError(f"resource components must be >= 0, got {self}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu + other.cpu, self.net + other.net, self.ram + other.ram)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        values = [a - b for a, b in zip(self.asTuple(), other.asTuple())]
        if min(values) < -RESOURCE_TOLERANCE:
            raise ValueError(f"{self} - {other} is negative")
        return ResourceVector(*(max(v, 0.0) for v in values))

    def scale(self, factor: float) -> "ResourceVector":
        return ResourceVector(self.cpu * factor, self.net * factor, self.ram * factor)

    def fitsWithin(self, other: "ResourceVector") -> bool:
        return all(a <= b + RESOURCE_TOLERANCE for a, b in zip(self.asTuple(), other.asTuple()))

    def ratio(self, capacity: "ResourceVector") -> Tuple[float, float, float]:
        return tuple(a / b if b > 0 else 0.0 for a, b in zip(self.asTuple(), capacity.asTuple()))

    def asTuple(self) -> Tuple[float, float, float]:
        return (self.cpu, self.net, self.ram)

    @staticmethod
    def zero() -> "ResourceVector":
        return ResourceVector(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ServiceClass:
    qs_id: str
    priority: int
    tau_qs: float
    l_qs: float
    mu_qs: ResourceVector = ResourceVector(1.0, 1.0, 1.0)
    lifetime: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.l_qs < 1:
            raise ConfigError(f"classes.{self.qs_id}.l_qs", f"must be in (0, 1), got {self.l_qs}")
        if not self.tau_qs > 0:
            raise ConfigError(f"classes.{self.qs_id}.tau_qs", f"must be > 0, got {self.tau_qs}")

    @property
    def lifetimeSlots(self) -> int:
        if self.lifetime is not None:
            return int(self.lifetime)
        return int(math.ceil(self.tau_qs * LIFETIME_FACTOR))


@dataclass(eq=False)
class Packet:
    packet_id: int
    qs_id: str
    priority: int
    size: int
    arrival_slot: int
    deadline_slot: int
    flow_id: str
    lane: Hashable = None
    hops: Tuple[str, ...] = ()
    remaining: int = 0
    entered_slot: int = 0
    service_start: Optional[int] = None
    destination: Optional[str] = None

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"packet size must be > 0, got {self.size}")
        if self.deadline_slot < self.arrival_slot:
            raise ValueError("deadline_slot precedes arrival_slot")
        if self.remaining == 0:
            self.remaining = self.size


@dataclass
class ClassStats:
    received: int = 0
    served: int = 0
    dropped: int = 0
    ejected: int = 0
    expired: int = 0
    waitSum: int = 0
    waitCount: int = 0

    @property
    def lost(self) -> int:
        return self.dropped + self.ejected + self.expired

    def meanWait(self) -> Optional[float]:
        return self.waitSum / self.waitCount if self.waitCount else None


@dataclass(frozen=True)
class LossResult:
    value: float
    bound: float
    noTraffic: bool = False

    @property
    def violated(self) -> bool:
        return self.value > self.bound


@dataclass(frozen=True)
class WaitResult:
    value: Optional[float]
    bound: float

    @property
    def absent(self) -> bool:
        return self.value is None

    @property
    def violated(self) -> bool:
        return self.value is not None and self.value > self.bound


class ClassQueue:
    """FIFO lanes of one service class; lanes are keyed by egress channel."""

    def __init__(self, serviceClass: ServiceClass, capacity: Optional[int] = None):
        self.serviceClass = serviceClass
        self.qs_id = serviceClass.qs_id
        self.priority = serviceClass.priority
        self.capacity = capacity
        self.lanes: Dict[Hashable, Deque[Packet]] = {}
        self.queuedWork = 0
        self.totals = ClassStats()
        self.window = ClassStats()

    def push(self, packet: Packet):
        lane = self.lanes.get(packet.lane)
        if lane is None:
            lane = self.lanes[packet.lane] = deque()
        lane.append(packet)
        self.queuedWork += packet.remaining

    def newest(self) -> Optional[Deque[Packet]]:
        newestLane = None
        for lane in self.lanes.values():
            if lane and (newestLane is None or lane[-1].packet_id > newestLane[-1].packet_id):
                newestLane = lane
        return newestLane

    def oldestServable(self, budgets: Dict[Hashable, int]) -> Optional[Deque[Packet]]:
        oldestLane = None
        for key, lane in self.lanes.items():
            if lane and budgets.get(key, 0) > 0:
                if oldestLane is None or lane[0].packet_id < oldestLane[0].packet_id:
                    oldestLane = lane
        return oldestLane

    def packetCount(self) -> int:
        return sum(len(lane) for lane in self.lanes.values())

    def count(self, counter: str, amount: int):
        setattr(self.totals, counter, getattr(self.totals, counter) + amount)
        setattr(self.window, counter, getattr(self.window, counter) + amount)


class QueueNode:
    """Balancer or server node: per-class queues sharing one buffer of Q_w work units.

    An arriving packet that does not fit may displace lower-priority packets
    (newest first, lowest class first) with probability p_eject. Displaced
    packets move to a separate storage area when it has room, otherwise they
    leave the system and are charged to their own class. Storage is served
    after every class queue.
    """

    def __init__(
        self,
        nodeId: str,
        classes: List[ServiceClass],
        buffer: Optional[int] = None,
        pEject: float = DEFAULT_P_EJECT,
        storageCapacity: int = 0,
        rng: np.random.Generator = None,
        eject: bool = True,
        expire: bool = True,
        classCaps: Dict[str, int] = None,
    ):
        if not 0 <= pEject <= 1:
            raise ConfigError("node.p_eject", f"must be in [0, 1], got {pEject}")
        self.nodeId = nodeId
        self.buffer = buffer
        self.pEject = pEject
        self.storageCapacity = storageCapacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.eject = eject
        self.expire = expire
        caps = classCaps or {}
        ordered = sorted(classes, key=lambda c: (c.priority, c.qs_id))
        self.queues: Dict[str, ClassQueue] = {c.qs_id: ClassQueue(c, caps.get(c.qs_id)) for c in ordered}
        self.byPriority: List[ClassQueue] = list(self.queues.values())
        self.storage: Deque[Packet] = deque()
        self.storageWork = 0
        self.storedByClass: Dict[str, int] = {c.qs_id: 0 for c in ordered}
        self.occupancy = 0
        self.resizeCeiling = buffer or 0
        self.history: Dict[int, Dict[str, ClassStats]] = {}
        self.lastUsage: Dict[Hashable, int] = {}

    def resize(self, buffer: int):
        if buffer != self.buffer:
            logger.info(f"Node {self.nodeId}: buffer {self.buffer} -> {buffer}")
        # shrinking below the occupancy only blocks admissions until it drains
        self.resizeCeiling = max(buffer, self.occupancy)
        self.buffer = buffer

    def _fits(self, queue: ClassQueue, size: int) -> bool:
        if queue.capacity is not None and queue.queuedWork + size > queue.capacity:
            return False
        return self.buffer is None or self.occupancy + size <= self.buffer

    def enqueue(self, packet: Packet, slot: int) -> Outcome:
        queue = self.queues[packet.qs_id]
        packet.remaining = packet.size
        packet.entered_slot = slot
        packet.service_start = None
        queue.count("received", packet.size)

        if self._fits(queue, packet.size):
            self._admit(queue, packet)
            return Outcome.Queued

        if not self._canEject(queue, packet):
            queue.count("dropped", packet.size)
            return Outcome.Dropped

        need = self.occupancy + packet.size - self.buffer
        while need > 0:
            need -= self._displaceNewest(packet.priority)
        self._admit(queue, packet)
        return Outcome.EjectedOther

    def _canEject(self, queue: ClassQueue, packet: Packet) -> bool:
        if not self.eject or self.buffer is None or self.occupancy > self.buffer:
            return False
        if queue.capacity is not None and queue.queuedWork + packet.size > queue.capacity:
            return False
        need = self.occupancy + packet.size - self.buffer
        available = sum(q.queuedWork for q in self.byPriority if q.priority > packet.priority)
        if available < need:
            return False
        if self.pEject < 1.0 and self.rng.random() >= self.pEject:
            return False
        return True

    def _displaceNewest(self, priority: int) -> int:
        for victimQueue in reversed(self.byPriority):
            if victimQueue.priority <= priority:
                break
            lane = victimQueue.newest()
            if lane is None:
                continue
            victim = lane.pop()
            freed = victim.remaining
            victimQueue.queuedWork -= freed
            self.occupancy -= freed
            if self.storageWork + freed <= self.storageCapacity:
                self.storage.append(victim)
                self.storageWork += freed
                self.storedByClass[victim.qs_id] += freed
            else:
                victimQueue.count("ejected", freed)
            return freed
        raise LedgerError(f"Node {self.nodeId}: no victim left to displace")

    def _admit(self, queue: ClassQueue, packet: Packet):
        queue.push(packet)
        self.occupancy += packet.remaining

    def _serve(self, queue: ClassQueue, packet: Packet, budget: int, slot: int) -> int:
        if packet.service_start is None:
            packet.service_start = slot
            queue.window.waitSum += slot - packet.entered_slot
            queue.window.waitCount += 1
            queue.totals.waitSum += slot - packet.entered_slot
            queue.totals.waitCount += 1
        amount = min(packet.remaining, budget)
        packet.remaining -= amount
        queue.count("served", amount)
        return amount

    def service_step(self, slot: int, budgets: Dict[Hashable, int]) -> List[Packet]:
        """Serve up to each lane's budget in strict priority order, FIFO within a class."""
        offered = dict(budgets)
        budgets = dict(budgets)
        completed = []
        if self.expire:
            self.purgeExpired(slot)

        for queue in self.byPriority:
            while True:
                lane = queue.oldestServable(budgets)
                if lane is None:
                    break
                packet = lane[0]
                amount = self._serve(queue, packet, budgets[packet.lane], slot)
                budgets[packet.lane] -= amount
                queue.queuedWork -= amount
                self.occupancy -= amount
                if packet.remaining == 0:
                    lane.popleft()
                    completed.append(packet)

        if self.storage:
            kept = deque()
            for packet in self.storage:
                budget = budgets.get(packet.lane, 0)
                if budget > 0:
                    queue = self.queues[packet.qs_id]
                    amount = self._serve(queue, packet, budget, slot)
                    budgets[packet.lane] -= amount
                    self.storageWork -= amount
                    self.storedByClass[packet.qs_id] -= amount
                if packet.remaining == 0:
                    completed.append(packet)
                else:
                    kept.append(packet)
            self.storage = kept
        self.lastUsage = {lane: offered[lane] - budgets[lane] for lane in offered}
        return completed

    def purgeExpired(self, slot: int) -> int:
        expired = 0
        for queue in self.byPriority:
            for lane in queue.lanes.values():
                while lane and lane[0].deadline_slot < slot:
                    packet = lane.popleft()
                    queue.queuedWork -= packet.remaining
                    self.occupancy -= packet.remaining
                    queue.count("expired", packet.remaining)
                    expired += packet.remaining
        if self.storage and any(p.deadline_slot < slot for p in self.storage):
            kept = deque()
            for packet in self.storage:
                if packet.deadline_slot < slot:
                    self.storageWork -= packet.remaining
                    self.storedByClass[packet.qs_id] -= packet.remaining
                    self.queues[packet.qs_id].count("expired", packet.remaining)
                    expired += packet.remaining
                else:
                    kept.append(packet)
            self.storage = kept
        return expired

    def queuedWork(self, qs_id: str = None) -> int:
        if qs_id is None:
            return self.occupancy + self.storageWork
        return self.queues[qs_id].queuedWork + self.storedByClass[qs_id]

    def laneBacklog(self) -> Dict[Hashable, int]:
        backlog: Dict[Hashable, int] = {}
        for queue in self.byPriority:
            for key, lane in queue.lanes.items():
                backlog[key] = backlog.get(key, 0) + sum(p.remaining for p in lane)
        for packet in self.storage:
            backlog[packet.lane] = backlog.get(packet.lane, 0) + packet.remaining
        return backlog

    def checkConservation(self):
        """received = served + dropped + ejected + expired + queued, per class."""
        for qs_id, queue in self.queues.items():
            t = queue.totals
            queued = sum(p.remaining for lane in queue.lanes.values() for p in lane)
            stored = sum(p.remaining for p in self.storage if p.qs_id == qs_id)
            if queued != queue.queuedWork or stored != self.storedByClass[qs_id]:
                raise LedgerError(f"Node {self.nodeId}/{qs_id}: queue bookkeeping drifted")
            if t.received != t.served + t.dropped + t.ejected + t.expired + queued + stored:
                raise LedgerError(
                    f"Node {self.nodeId}/{qs_id}: received {t.received} != served {t.served} + dropped {t.dropped}"
                    f" + ejected {t.ejected} + expired {t.expired} + queued {queued + stored}")
        if self.buffer is not None and self.occupancy > max(self.buffer, self.resizeCeiling):
            raise LedgerError(f"Node {self.nodeId}: occupancy {self.occupancy} above buffer {self.buffer}")

    def closeWindow(self, windowIndex: int) -> Dict[str, ClassStats]:
        closed = {}
        for qs_id, queue in self.queues.items():
            closed[qs_id] = queue.window
            queue.window = ClassStats()
        self.history[windowIndex] = closed
        return closed

    def windowStats(self, qs_id: str, windowIndex: int) -> ClassStats:
        if windowIndex not in self.history:
            raise KeyError(f"window {windowIndex} of node {self.nodeId} is not closed")
        return self.history[windowIndex][qs_id]


def loss_coefficient(node: QueueNode, qs_id: str, windowIndex: int) -> LossResult:
    stats = node.windowStats(qs_id, windowIndex)
    bound = node.queues[qs_id].serviceClass.l_qs
    if stats.received == 0:
        return LossResult(0.0, bound, noTraffic=True)
    return LossResult(stats.lost / stats.received, bound)


def mean_wait(node: QueueNode, qs_id: str, windowIndex: int) -> WaitResult:
    stats = node.windowStats(qs_id, windowIndex)
    return WaitResult(stats.meanWait(), node.queues[qs_id].serviceClass.tau_qs)


@dataclass
class FlowRelease:
    flow_id: str
    qs_id: str
    start_slot: int
    path: Tuple[str, ...]
    links: Dict[str, float] = field(default_factory=dict)
    server_id: Optional[str] = None
    reserved: ResourceVector = ResourceVector.zero()
    epsilon: int = 0
    release_slot: Optional[int] = None


class ResourceLedger:
    """Allocations held by flows; every holding is released exactly once."""

    def __init__(self, linkCapacity: Dict[str, float], serverCapacity: Dict[str, ResourceVector]):
        self.linkCapacity = dict(linkCapacity)
        self.serverCapacity = dict(serverCapacity)
        self.linkHeld = {k: 0.0 for k in linkCapacity}
        self.serverHeld = {k: ResourceVector.zero() for k in serverCapacity}
        self.allocatedTotal = 0.0
        self.releasedTotal = 0.0
        self.holdings: Dict[Tuple[str, int], FlowRelease] = {}
        self.history: List[FlowRelease] = []

    def allocate(
        self,
        flow_id: str,
        qs_id: str,
        t0: int,
        links: Dict[str, float],
        path: Tuple[str, ...] = (),
        server_id: str = None,
        reserved: ResourceVector = ResourceVector.zero(),
    ) -> FlowRelease:
        key = (flow_id, t0)
        if key in self.holdings:
            raise ReleaseError(f"flow {flow_id} already holds resources from slot {t0}")
        record = FlowRelease(flow_id, qs_id, t0, tuple(path), dict(links), server_id, reserved)
        for linkId, amount in record.links.items():
            self.linkHeld[linkId] += amount
        if server_id is not None:
            self.serverHeld[server_id] = self.serverHeld[server_id] + reserved
        self.allocatedTotal += self._magnitude(record)
        self.holdings[key] = record
        self.history.append(record)
        return record

    def release(self, record: FlowRelease, slot: int) -> "ResourceLedger":
        if record.epsilon == 1:
            raise ReleaseError(f"flow {record.flow_id} (t0={record.start_slot}) was already released")
        record.epsilon = 1
        record.release_slot = slot
        for linkId, amount in record.links.items():
            self.linkHeld[linkId] -= amount
        if record.server_id is not None:
            self.serverHeld[record.server_id] = self.serverHeld[record.server_id] - record.reserved
        self.releasedTotal += self._magnitude(record)
        del self.holdings[(record.flow_id, record.start_slot)]
        return self

    def holding(self, flow_id: str) -> Optional[FlowRelease]:
        for (fid, _), record in self.holdings.items():
            if fid == flow_id:
                return record
        return None

    def releaseFlow(self, flow_id: str, slot: int):
        record = self.holding(flow_id)
        if record is not None:
            self.release(record, slot)

    def releaseAll(self, slot: int):
        for record in list(self.holdings.values()):
            self.release(record, slot)

    def linkAvailable(self, linkId: str) -> float:
        return self.linkCapacity[linkId] - self.linkHeld[linkId]

    def serverAvailable(self, serverId: str) -> ResourceVector:
        capacity = self.serverCapacity[serverId]
        held = self.serverHeld[serverId]
        return ResourceVector(*(max(c - h, 0.0) for c, h in zip(capacity.asTuple(), held.asTuple())))

    def heldMagnitude(self) -> float:
        return sum(self._magnitude(r) for r in self.holdings.values())

    def balanced(self) -> bool:
        return math.isclose(self.allocatedTotal - self.releasedTotal, self.heldMagnitude(), abs_tol=1e-6)

    def outstanding(self) -> List[FlowRelease]:
        return list(self.holdings.values())

    @staticmethod
    def _magnitude(record: FlowRelease) -> float:
        return sum(record.links.values()) + sum(record.reserved.asTuple())


def release_resources(release: FlowRelease, ledger: ResourceLedger, slot: int) -> ResourceLedger:
    return ledger.release(release, slot)
