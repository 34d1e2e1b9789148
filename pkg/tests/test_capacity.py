import math

import numpy as np
import pytest

from fractalqos.lib.errors import SaturationError, TraceError
from fractalqos.op.capacity import (
    CalibrationGrid,
    Calibrator,
    CapacityController,
    ControlAction,
    decide_action,
    fluid_loss,
    isotonic,
    required_buffer,
    required_capacity,
)
from fractalqos.op.traffic import GeneratorSpec, TrafficTrace, compose_traffic


def test_fluid_loss_simple_queue():
    steady = np.ones((1, 16))
    assert fluid_loss(steady, 1.0, 1.0)[0] == pytest.approx(0.0)
    assert fluid_loss(steady, 1.0, 0.0)[0] == pytest.approx(1.0)
    burst = np.zeros((1, 4))
    burst[0, 0] = 3.0
    assert fluid_loss(burst, 1.0, 2.0)[0] == pytest.approx(1 / 3)
    # more buffer or more service never loses more
    traces = compose_traffic(GeneratorSpec(0.8, 1.0, 8, 0.7, length=1024, seed=1)).slots[None, :]
    losses = fluid_loss(traces, np.array([[1.1], [1.3]]), np.array([[0.0, 4.0, 16.0]]))[0]
    assert np.all(np.diff(losses, axis=1) <= 1e-12)
    assert np.all(losses[1] <= losses[0] + 1e-12)


def test_isotonic_lifts_to_monotone():
    raw = np.array([[[2.0]], [[1.0]], [[np.inf]], [[3.0]]])
    result = isotonic(raw)
    assert result.ravel().tolist() == [2.0, 2.0, math.inf, math.inf]


def test_grid_validation():
    with pytest.raises(TraceError):
        CalibrationGrid(rho=(0.5, 0.3)).validate()
    with pytest.raises(TraceError):
        CalibrationGrid(H=(0.5, 1.0)).validate()
    with pytest.raises(TraceError):
        CalibrationGrid(sigma_var=()).validate()


def test_table_lookup(table):
    exact = table.lookup(0.5, 0.7, 1.0)
    assert exact.value == pytest.approx(1.0 * 1.8 * 2.0)
    assert not exact.clamped and not exact.saturated
    middle = table.lookup(0.6, 0.7, 1.0)
    assert middle.value == pytest.approx((table.lookup(0.5, 0.7, 1.0).value + table.lookup(0.7, 0.7, 1.0).value) / 2)
    outside = table.lookup(0.1, 0.7, 1.0)
    assert outside.clamped
    assert outside.value == pytest.approx(table.lookup(0.3, 0.7, 1.0).value)
    corner = table.lookup(0.9, 0.9, 4.0)
    assert corner.saturated
    with pytest.raises(SaturationError):
        corner.require()
    assert table.isIsotonic()


def test_ratio_to_baseline(table):
    assert table.ratioToBaseline(0.7, 0.5, 0.5) == pytest.approx(1.0)
    assert table.ratioToBaseline(0.7, 0.9, 1.0) == pytest.approx(2.6 * 2.0 / 1.5)
    assert math.isinf(table.ratioToBaseline(0.9, 0.9, 4.0))


def test_required_buffer(table):
    assert required_buffer(table, 10.0, 0.0, 0.7, 1.0).value == 0.0
    assert required_buffer(table, 2.0, 2.0, 0.7, 1.0).saturated
    query = required_buffer(table, 4.0, 2.0, 0.7, 1.0)
    assert query.value == pytest.approx(table.lookup(0.5, 0.7, 1.0).value * 2.0)


def test_required_capacity_inverts_required_buffer(table):
    # normalized buffers at H=0.7, sigma=1: 3.6 at rho=0.5 and 8.4 at rho=0.7
    net = required_capacity(table, 12.0, 2.0, 0.7, 1.0)
    assert net.value == pytest.approx(2.0 / 0.6)
    assert required_buffer(table, net.value, 2.0, 0.7, 1.0).value == pytest.approx(12.0)


def test_required_capacity_limits(table):
    assert required_capacity(table, 1e9, 2.0, 0.7, 1.0).value == pytest.approx(2.0 / 0.9)
    starved = required_capacity(table, 0.0, 2.0, 0.7, 1.0)
    assert starved.value == pytest.approx(2.0 / 0.3) and starved.clamped
    assert required_capacity(table, 10.0, 0.0, 0.7, 1.0).value == 0.0


def test_decide_action():
    assert decide_action(10, 5.0, 10, 5.0) == ControlAction.Nothing
    assert decide_action(10, 5.0, 20, 5.0) == ControlAction.GrowBuffer
    assert decide_action(10, 5.0, 10, 6.0) == ControlAction.GrowCapacity
    assert decide_action(10, 5.0, 20, 6.0) == ControlAction.Both


def test_controller_grows_capacity_under_overload(table):
    trace = compose_traffic(GeneratorSpec(0.8, 5.0, 9, 0.65, length=1024, seed=4))
    controller = CapacityController(table, bufferFloor=16, bufferCeiling=256)
    decision = controller.control_step(0, trace, 16, 4.0)
    assert "saturated" in decision.flags
    assert decision.recommended_net > 4.0
    assert decision.action in (ControlAction.GrowCapacity, ControlAction.Both)
    assert controller.decisions == [decision]
    record = decision.asRecord()
    assert record["net_new"] == decision.recommended_net
    assert record["lambda"] == pytest.approx(5.0)


def test_controller_never_shrinks(table):
    trace = compose_traffic(GeneratorSpec(0.6, 2.0, 9, 0.6, length=1024, seed=4))
    decision = CapacityController(table).control_step(3, trace, 1000, 20.0)
    assert decision.action == ControlAction.Nothing
    assert decision.recommended_net <= 20.0
    assert "clamped" in decision.flags


def test_controller_respects_buffer_ceiling(table):
    trace = compose_traffic(GeneratorSpec(0.85, 3.0, 9, 0.7, length=1024, seed=2))
    decision = CapacityController(table, bufferCeiling=8, margin=2.0).control_step(0, trace, 8, 3.5)
    assert decision.recommended_buffer <= 8
    assert "ceiling" in decision.flags or "saturated" in decision.flags


def test_controller_skips_degenerate_windows(table):
    decision = CapacityController(table).control_step(1, TrafficTrace(np.full(1024, 2.0)), 32, 4.0)
    assert decision.action == ControlAction.Nothing
    assert decision.flags == ["degenerate"]
    assert decision.signature is None


def test_calibrator_builds_monotone_reproducible_table():
    grid = CalibrationGrid(rho=(0.5, 0.9), H=(0.5, 0.8), sigma_var=(0.5, 2.0))
    calls = []

    def observer(total, increment, count, done, data, status):
        calls.append((total, count, done))

    calibrator = Calibrator(grid, 0.05, seeds=2, length=1024, cascadeDepth=6, workers=1)
    calibrator.addObserver(observer)
    first = calibrator.run()
    second = Calibrator(grid, 0.05, seeds=2, length=1024, cascadeDepth=6, workers=1).run()
    assert first.values.shape == (2, 2, 2)
    assert first.isIsotonic()
    assert np.array_equal(first.values, second.values)
    assert first.metadata["loss_target"] == 0.05
    assert calls[-1] == (4, 4, True)


def test_calibrator_argument_checks():
    with pytest.raises(TraceError):
        Calibrator(lossTarget=0.5)
    with pytest.raises(TraceError):
        Calibrator(seeds=0)
