import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Tuple

import numpy as np

from fractalqos.op.balancer import NodeLoad
from fractalqos.op.routing import Link, ServerSpec, Topology
from fractalqos.sim.node import Outcome, Packet, QueueNode, ResourceVector, ServiceClass

logger = logging.getLogger(__name__)


class SlotBudget:
    """Integer work per slot out of a fractional rate; only the fraction carries over."""

    def __init__(self):
        self.credit = 0.0

    def take(self, rate: float) -> int:
        total = self.credit + max(rate, 0.0)
        budget = int(math.floor(total))
        self.credit = total - budget
        return budget


class TransitChannel:
    """FIFO of packets crossing one link after the first hop."""

    def __init__(self, link: Link):
        self.link = link
        self.queue: Deque[Packet] = deque()
        self.budget = SlotBudget()
        self.carried = 0
        self.provisioned = 0.0
        self.windowCarried = 0
        self.windowProvisioned = 0.0

    @property
    def backlog(self) -> int:
        return sum(p.remaining for p in self.queue)

    def offer(self, packet: Packet):
        packet.remaining = packet.size
        self.queue.append(packet)

    def transmit(self, budget: int) -> Tuple[List[Packet], int]:
        done = []
        used = 0
        while self.queue and budget > used:
            packet = self.queue[0]
            amount = min(packet.remaining, budget - used)
            packet.remaining -= amount
            used += amount
            if packet.remaining == 0:
                done.append(self.queue.popleft())
        return done, used

    def account(self, used: int):
        self.carried += used
        self.windowCarried += used
        self.provisioned += self.link.bandwidth
        self.windowProvisioned += self.link.bandwidth

    def closeWindow(self) -> float:
        utilization = self.windowCarried / self.windowProvisioned if self.windowProvisioned > 0 else 0.0
        self.windowCarried = 0
        self.windowProvisioned = 0.0
        return min(utilization, 1.0)


@dataclass
class Delivery:
    flow_id: str
    qs_id: str
    server_id: str
    size: int
    arrival_slot: int
    delivered_slot: int

    @property
    def delay(self) -> int:
        return self.delivered_slot - self.arrival_slot + 1


class ServerState:
    """A server: one queue node without ejection or expiry, drained at its cpu rate."""

    def __init__(self, spec: ServerSpec, classes: List[ServiceClass]):
        self.spec = spec
        self.server_id = spec.server_id
        self.capacity = spec.capacity
        self.background = spec.background
        self.node = QueueNode(spec.server_id, classes, buffer=None, eject=False, expire=False)
        self.budget = SlotBudget()
        self.processed = 0
        self.received = 0
        self.backlogSum = 0
        self.slots = 0

    def scale(self, factor: float):
        self.capacity = self.capacity.scale(factor)
        logger.info(f"Server {self.server_id}: capacity scaled by {factor} to {self.capacity}")

    def accept(self, packet: Packet, slot: int):
        packet.lane = None
        self.received += packet.size
        outcome = self.node.enqueue(packet, slot)
        if outcome != Outcome.Queued:
            raise AssertionError(f"server {self.server_id} refused a packet: {outcome}")

    def step(self, slot: int) -> List[Packet]:
        rate = self.capacity.cpu - self.background.cpu
        completed = self.node.service_step(slot, {None: self.budget.take(rate)})
        self.processed += self.node.lastUsage.get(None, 0)
        self.backlogSum += self.node.queuedWork()
        self.slots += 1
        return completed

    def measuredLoad(self) -> NodeLoad:
        """Utilization over the slots since the last call, background included."""
        slots = max(self.slots, 1)
        cpu = (self.processed + self.background.cpu * slots) / (self.capacity.cpu * slots) if self.capacity.cpu else 0.0
        net = (self.received + self.background.net * slots) / (self.capacity.net * slots) if self.capacity.net else 0.0
        ram = (self.backlogSum / slots + self.background.ram) / self.capacity.ram if self.capacity.ram else 0.0
        self.processed = self.received = self.backlogSum = self.slots = 0
        return NodeLoad(self.server_id, *(min(max(v, 0.0), 1.0) for v in (cpu, net, ram)))


@dataclass
class WindowUsage:
    link_utilization: Dict[str, float]
    server_loads: Dict[str, NodeLoad]
    deliveries: List[Delivery] = field(default_factory=list)

    @property
    def busiestChannel(self) -> float:
        return max(self.link_utilization.values(), default=0.0)


class Network:
    """Balancer node, links and servers advanced one slot at a time.

    Stages run back to front (servers, transit links, balancer) so a packet
    crosses at most one stage per slot. Link budgets are shared between the
    transit queue of a link and balancer lanes that start on it.
    """

    def __init__(self, topology: Topology, balancerNode: QueueNode, classes: List[ServiceClass],
                 onDelivery: Callable[[Delivery], None] = None):
        self.topology = topology
        self.balancer = balancerNode
        self.channels: Dict[str, TransitChannel] = {k: TransitChannel(link) for k, link in topology.links.items()}
        self.servers: Dict[str, ServerState] = {
            s.server_id: ServerState(s, classes) for s in topology.servers.values()
        }
        self.onDelivery = onDelivery
        self.deliveries: List[Delivery] = []
        self.injected = 0
        self.delivered = 0

    def egressLinks(self) -> List[Link]:
        origin = self.topology.balancer
        return [link for link in self.topology.links.values() if origin in link.endpoints()]

    def inject(self, packet: Packet, slot: int) -> Outcome:
        if not packet.hops:
            raise ValueError(f"packet {packet.packet_id} of {packet.flow_id} has no route")
        packet.lane = packet.hops[0]
        self.injected += packet.size
        return self.balancer.enqueue(packet, slot)

    def _forward(self, packet: Packet, slot: int):
        packet.hops = packet.hops[1:]
        if packet.hops:
            self.channels[packet.hops[0]].offer(packet)
        else:
            self.servers[packet.destination].accept(packet, slot)

    def step(self, slot: int):
        for server in self.servers.values():
            for packet in server.step(slot):
                delivery = Delivery(packet.flow_id, packet.qs_id, server.server_id, packet.size,
                                    packet.arrival_slot, slot)
                self.delivered += packet.size
                self.deliveries.append(delivery)
                if self.onDelivery is not None:
                    self.onDelivery(delivery)

        budgets = {k: channel.budget.take(channel.link.bandwidth) for k, channel in self.channels.items()}
        handoffs = []
        used = {}
        for linkId, channel in self.channels.items():
            done, amount = channel.transmit(budgets[linkId])
            budgets[linkId] -= amount
            used[linkId] = amount
            handoffs.extend(done)

        lanes = {k: budgets[k] for k in budgets}
        for packet in self.balancer.service_step(slot, lanes):
            handoffs.append(packet)
        for linkId, amount in self.balancer.lastUsage.items():
            used[linkId] = used.get(linkId, 0) + amount

        for linkId, channel in self.channels.items():
            channel.account(used.get(linkId, 0))
        for packet in handoffs:
            self._forward(packet, slot)

    def scaleServer(self, serverId: str, factor: float):
        self.servers[serverId].scale(factor)

    def closeWindow(self) -> WindowUsage:
        usage = WindowUsage(
            {k: channel.closeWindow() for k, channel in self.channels.items()},
            {k: server.measuredLoad() for k, server in self.servers.items()},
            self.deliveries,
        )
        self.deliveries = []
        return usage

    def inFlight(self) -> int:
        return sum(channel.backlog for channel in self.channels.values())

    def checkConservation(self):
        self.balancer.checkConservation()
        for server in self.servers.values():
            server.node.checkConservation()

    def serverCapacities(self) -> Dict[str, ResourceVector]:
        return {k: s.capacity for k, s in self.servers.items()}

    def serverBackgrounds(self) -> Dict[str, ResourceVector]:
        return {k: s.background for k, s in self.servers.items()}

    def serverBacklogs(self) -> Dict[str, int]:
        return {k: s.node.queuedWork() for k, s in self.servers.items()}


def packetize(work: int, packetSize: int) -> Iterable[int]:
    """Sizes of the packets carrying `work` units: full packets then the remainder."""
    full, rest = divmod(int(work), int(packetSize))
    sizes = [packetSize] * full
    if rest:
        sizes.append(rest)
    return sizes


def integer_arrivals(values: np.ndarray, carry: float = 0.0) -> Tuple[np.ndarray, float]:
    """Round a work series to integers by cumulative rounding; the totals match."""
    cumulative = carry + np.cumsum(np.maximum(np.asarray(values, dtype=np.float64), 0.0))
    rounded = np.floor(cumulative + 0.5).astype(np.int64)
    arrivals = np.diff(np.concatenate(([int(math.floor(carry + 0.5))], rounded)))
    return arrivals, float(cumulative[-1]) if len(cumulative) else carry
