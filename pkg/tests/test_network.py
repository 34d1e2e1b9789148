import numpy as np
import pytest

from fractalqos.op.routing import Link, ServerSpec, Topology
from fractalqos.sim.network import Network, SlotBudget, TransitChannel, integer_arrivals, packetize
from fractalqos.sim.node import Outcome, Packet, QueueNode, ResourceVector, ServiceClass

DATA = ServiceClass("data", 0, 100.0, 0.01)


def line(cpu=3.0, background=ResourceVector.zero()):
    """lb --(4)--> a --(2)--> b with one server at b."""
    links = [Link("lb-a", "lb", "a", 1.0, 8.0, [4.0]), Link("a-b", "a", "b", 1.0, 2.0)]
    server = ServerSpec("s1", "b", ResourceVector(cpu, 8.0, 16.0), background)
    return Topology(["lb", "a", "b"], links, "lb", [server])


def routed_packet(pid, size=4, slot=0):
    return Packet(pid, "data", 0, size, slot, slot + 1000, "f1", hops=("lb-a", "a-b"), destination="s1")


def test_slot_budget_carries_only_the_fraction():
    budget = SlotBudget()
    assert [budget.take(1.5) for _ in range(4)] == [1, 2, 1, 2]
    assert budget.take(-3.0) == 0
    assert budget.credit == pytest.approx(0.0)


def test_packetize():
    assert packetize(10, 4) == [4, 4, 2]
    assert packetize(8, 4) == [4, 4]
    assert packetize(0, 4) == []


def test_integer_arrivals_preserve_totals():
    values = np.random.default_rng(3).gamma(2.0, 0.7, 500)
    arrivals, carry = integer_arrivals(values)
    assert arrivals.dtype == np.int64
    assert np.all(arrivals >= 0)
    assert abs(arrivals.sum() - values.sum()) <= 0.5
    # a continuation picks up where the first half stopped
    first, middle = integer_arrivals(values[:250])
    second, _ = integer_arrivals(values[250:], middle)
    assert np.array_equal(np.concatenate([first, second]), arrivals)
    empty, same = integer_arrivals(np.zeros(0), 1.25)
    assert len(empty) == 0 and same == 1.25


def test_transit_channel_is_fifo_and_budget_limited():
    channel = TransitChannel(Link("x", "a", "b", 1.0, 5.0))
    channel.offer(Packet(1, "data", 0, 3, 0, 10, "f"))
    channel.offer(Packet(2, "data", 0, 3, 0, 10, "f"))
    done, used = channel.transmit(4)
    assert [p.packet_id for p in done] == [1]
    assert used == 4
    assert channel.backlog == 2
    channel.account(used)
    assert channel.closeWindow() == pytest.approx(4 / 5)
    assert channel.closeWindow() == 0.0


def test_packet_crosses_each_stage_in_turn():
    deliveries = []
    network = Network(line(), QueueNode("lb", [DATA], buffer=32), [DATA], onDelivery=deliveries.append)
    assert network.inject(routed_packet(1), 0) == Outcome.Queued
    for slot in range(6):
        network.step(slot)
        network.checkConservation()
    [delivery] = deliveries
    assert delivery.server_id == "s1"
    assert delivery.delivered_slot == 4
    assert delivery.delay == 5
    assert network.delivered == network.injected == 4
    assert network.inFlight() == 0
    usage = network.closeWindow()
    assert usage.deliveries == [delivery]
    assert usage.link_utilization["lb-a"] == pytest.approx(4 / (4 * 6))
    assert usage.link_utilization["a-b"] == pytest.approx(4 / (2 * 6))
    assert usage.busiestChannel == usage.link_utilization["a-b"]
    assert network.closeWindow().deliveries == []


def test_packets_without_route_are_refused():
    network = Network(line(), QueueNode("lb", [DATA], buffer=32), [DATA])
    with pytest.raises(ValueError):
        network.inject(Packet(1, "data", 0, 4, 0, 10, "f1"), 0)
    assert [link.link_id for link in network.egressLinks()] == ["lb-a"]


def test_server_load_includes_background_and_resets():
    network = Network(line(cpu=4.0, background=ResourceVector(1.0, 0.0, 2.0)), QueueNode("lb", [DATA], buffer=32),
                      [DATA])
    network.inject(routed_packet(1, size=2), 0)
    for slot in range(4):
        network.step(slot)
    server = network.servers["s1"]
    load = server.measuredLoad()
    # the packet reaches the server at slot 1 and is drained at 3 units per slot in slot 2
    assert load.cpu == pytest.approx((2 + 1.0 * 4) / (4.0 * 4))
    assert load.net == pytest.approx(2 / (8.0 * 4))
    assert load.ram == pytest.approx(2.0 / 16.0)
    idle = server.measuredLoad()
    assert idle.cpu == pytest.approx(0.25)


def test_scaling_a_server_slows_service():
    network = Network(line(cpu=4.0), QueueNode("lb", [DATA], buffer=32), [DATA])
    network.scaleServer("s1", 0.5)
    assert network.serverCapacities()["s1"] == ResourceVector(2.0, 4.0, 8.0)
    assert network.serverBackgrounds()["s1"] == ResourceVector.zero()


def test_server_backlog_reports_queued_work():
    network = Network(line(cpu=1.0), QueueNode("lb", [DATA], buffer=32), [DATA])
    assert network.serverBacklogs() == {"s1": 0}
    for pid in range(3):
        network.inject(routed_packet(pid + 1), 0)
    for slot in range(10):
        network.step(slot)
    backlog = network.serverBacklogs()["s1"]
    assert backlog == network.servers["s1"].node.queuedWork()
    assert backlog > 0
    network.checkConservation()
