import numpy as np
import pytest

from fractalqos.lib.errors import SchedulingError
from fractalqos.sim.kernel import EventKind, Kernel
from fractalqos.sim.rng import RandomStreams


def test_events_run_in_slot_then_schedule_order():
    kernel = Kernel(recordEvents=True)
    seen = []
    kernel.on(EventKind.Arrival, lambda e: seen.append(("arrival", e.slot, e.entity)))
    kernel.on(EventKind.ServiceComplete, lambda e: seen.append(("service", e.slot, e.entity)))
    kernel.scheduleAt(2, EventKind.ServiceComplete, "n")
    kernel.scheduleAt(1, EventKind.Arrival, "b")
    kernel.scheduleAt(2, EventKind.Arrival, "a")
    kernel.scheduleAt(1, EventKind.ServiceComplete, "n")
    kernel.runUntil(10)
    assert seen == [
        ("arrival", 1, "b"),
        ("service", 1, "n"),
        ("service", 2, "n"),
        ("arrival", 2, "a"),
    ]
    assert kernel.now == 10
    assert [row[2] for row in kernel.eventLog] == ["arrival", "service_complete", "service_complete", "arrival"]


def test_run_until_is_exclusive_and_resumable():
    kernel = Kernel()
    seen = []
    kernel.on(EventKind.Arrival, lambda e: seen.append(e.slot))
    for slot in (0, 4, 5):
        kernel.scheduleAt(slot, EventKind.Arrival)
    kernel.runUntil(5)
    assert seen == [0, 4]
    assert kernel.pending == 1
    assert kernel.peekSlot() == 5
    kernel.runUntil(6)
    assert seen == [0, 4, 5]
    assert kernel.pending == 0


def test_handlers_may_schedule_same_slot_events():
    kernel = Kernel()
    seen = []

    def boundary(event):
        seen.append("boundary")
        kernel.scheduleAt(event.slot, EventKind.Rebalance)

    kernel.on(EventKind.WindowBoundary, boundary)
    kernel.on(EventKind.Rebalance, lambda e: seen.append("rebalance"))
    kernel.scheduleAt(3, EventKind.WindowBoundary)
    kernel.runUntil(4)
    assert seen == ["boundary", "rebalance"]


def test_past_events_are_rejected():
    kernel = Kernel()
    kernel.runUntil(5)
    with pytest.raises(SchedulingError):
        kernel.scheduleAt(4, EventKind.Arrival)
    with pytest.raises(SchedulingError):
        kernel.runUntil(3)


def test_cancelled_events_are_skipped():
    kernel = Kernel()
    seen = []
    kernel.on(EventKind.Announcement, lambda e: seen.append(e.entity))
    keep = kernel.scheduleAt(1, EventKind.Announcement, "keep")
    drop = kernel.scheduleAt(1, EventKind.Announcement, "drop")
    kernel.cancel(drop)
    kernel.cancel(drop)
    kernel.runUntil(2)
    assert seen == [keep.entity]
    assert kernel.cancelled == 1
    assert kernel.pending == 0


def test_clock_time_uses_slot_duration():
    kernel = Kernel(slotDuration=0.5)
    kernel.runUntil(8)
    assert kernel.clock.time() == 4.0


def test_event_detail():
    kernel = Kernel(recordEvents=True)
    kernel.scheduleAt(0, EventKind.WindowBoundary, "window", {"window": 3})
    kernel.scheduleAt(0, EventKind.Arrival, "f1", 7)
    kernel.runUntil(1)
    assert [row[4] for row in kernel.eventLog] == ["window=3", "7"]


def test_random_streams_are_named_and_independent():
    a = RandomStreams(42)
    b = RandomStreams(42)
    assert np.array_equal(a.stream("flow/x").random(5), b.stream("flow/x").random(5))
    assert a.seedFor("flow/x") == b.seedFor("flow/x")
    assert a.seedFor("flow/x") != a.seedFor("flow/y")
    assert a.seedFor("flow/x") != RandomStreams(43).seedFor("flow/x")
    # touching another stream leaves this one unchanged
    c = RandomStreams(42)
    c.stream("node/eject").random(100)
    assert np.array_equal(c.stream("flow/x").random(5), RandomStreams(42).stream("flow/x").random(5))
