import json
import os

import numpy as np
import pytest

from fractalqos.lib.errors import JobInterrupted
from fractalqos.sim.config import Method, load_scenario, parse_scenario
from fractalqos.sim.kernel import EventKind, EventRecord
from fractalqos.sim.scenario import (
    COMPARISON_ROWS,
    Comparison,
    ScenarioRun,
    compare_methods,
    ensure_table,
    needs_table,
    run_scenario,
)

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def shipped(name, baseDir):
    with open(os.path.join(SCENARIOS, name)) as f:
        return parse_scenario(json.load(f), str(baseDir))


def test_arrivals_do_not_depend_on_enabled_methods(small_config, table):
    full = ScenarioRun(small_config, 1, table)
    bare = ScenarioRun(small_config.withMethods([]), 1)
    assert set(full.arrivals) == {"g1", "b1", "b2"}
    for flowId in full.arrivals:
        assert np.array_equal(full.arrivals[flowId], bare.arrivals[flowId])
        assert len(full.arrivals[flowId]) == small_config.run_length
    other = ScenarioRun(small_config.withMethods([]), 2)
    assert not np.array_equal(bare.arrivals["g1"], other.arrivals["g1"])


def test_capacity_control_requires_a_table(small_config):
    with pytest.raises(ValueError):
        ScenarioRun(small_config, 1)
    assert needs_table(small_config)
    assert not needs_table(small_config.withMethods([Method.FractalRouting]))


def test_run_is_deterministic_and_checks_every_slot(small_config, table):
    first = ScenarioRun(small_config, 1, table, verifyLedger=True, recordEvents=True).run()
    second = ScenarioRun(small_config, 1, table).run()
    assert first.metrics == second.metrics
    assert first.ledgerChecks == small_config.windows * small_config.window
    assert first.metrics.windows == small_config.windows - small_config.warmup_windows
    assert [w.window_index for w in first.windows] == list(range(small_config.windows))
    assert first.events and first.events[0][2] == "window_boundary"
    assert len(first.controlLog) == small_config.windows
    assert first.balancerLog and first.routingLog
    assert {row["seed"] for row in first.metricsLog} == {1}


def test_capacity_control_cuts_loss_on_an_overloaded_node(single_config, table):
    controlled = ScenarioRun(single_config, 3, table).run()
    uncontrolled = ScenarioRun(single_config.withMethods([]), 3).run()
    assert uncontrolled.metrics.loss_pct > 10.0
    assert controlled.metrics.loss_pct < uncontrolled.metrics.loss_pct
    grown = [row for row in controlled.controlLog if row["net_new"] > row["net"]]
    assert grown
    assert controlled.windows[-1].egress > 4.0
    assert uncontrolled.windows[-1].egress == 4.0


def test_capacity_change_reaches_the_servers(small_data, tmp_path, table):
    small_data["capacity_changes"] = [{"slot": 1024, "server": "s1", "scale": 0.5}]
    config = parse_scenario(small_data, str(tmp_path)).withMethods([Method.LoadBalancing])
    run = ScenarioRun(config, 1, table)
    run.run()
    assert run.network.servers["s1"].capacity.cpu == 4.0
    assert run.balancer.capacity["s1"].cpu == 4.0


def test_run_scenario_reports_one_row(small_config, table):
    report, runs = run_scenario(small_config.withMethods([Method.FractalRouting]), table, workers=1)
    [row] = report.rows
    assert row.row == "fractal_routing"
    assert row.seeds == [1]
    assert len(runs) == 1
    assert 0.0 <= row.loss_pct <= 100.0
    assert 0.0 <= row.utilization <= 1.0


@pytest.mark.slow
def test_balancing_rows_spread_load_that_static_rows_pile_on_one_server(small_config, table):
    calls = []
    comparison = compare_methods(small_config, table, workers=1,
                                 observer=lambda *args: calls.append(args))
    report = comparison.report
    assert [row.row for row in report.rows] == [name for name, _ in COMPARISON_ROWS]
    static = report.row("capacity_control").imbalance
    assert report.row("load_balancing").imbalance < static
    assert report.row("combined").imbalance < static
    assert report.row("combined").methods == ["capacity_control", "fractal_routing", "load_balancing"]
    for record in report.records():
        assert 0.0 <= record["loss_pct"] <= 100.0
    assert calls[-1][3] is True
    assert set(comparison.results) == {name for name, _ in COMPARISON_ROWS}


def test_interrupted_comparison_stops(small_config, table):
    comparison = Comparison(small_config, COMPARISON_ROWS, table, workers=1)

    def interrupt(total, increment, count, done, data, status):
        comparison.requestInterrupt()

    comparison.addObserver(interrupt)
    with pytest.raises(JobInterrupted):
        comparison.run()


def test_ensure_table_uses_the_cached_table(scenario_file, table):
    config = load_scenario(str(scenario_file))
    loaded = ensure_table(config)
    assert np.allclose(loaded.values, table.values)
    assert loaded.grid.rho == table.grid.rho


def test_unchanged_announcement_keeps_routes(small_config):
    run = ScenarioRun(small_config.withMethods([Method.FractalRouting]), 1)
    run._reroute(0, 0)
    announcement = EventRecord(512, EventKind.Announcement, "routing", {"window": 1})
    run._onAnnouncement(announcement)
    logged = len(run.result.routingLog)
    routes = dict(run.routes)
    run._onAnnouncement(announcement)
    assert len(run.result.routingLog) == logged
    assert run.routes == routes
    run._onAnnouncement(EventRecord(1024, EventKind.Announcement, "routing", {"window": 2}))
    assert len(run.result.routingLog) > logged


def test_controller_provisions_an_unprovisioned_egress(single_data, tmp_path, table):
    single_data["topology"]["links"][0]["channels"] = [0]
    config = parse_scenario(single_data, str(tmp_path))
    result = ScenarioRun(config, 3, table).run()
    first = result.controlLog[0]
    assert first["net"] == 0.0
    assert first["net_new"] > 0.0
    assert result.windows[-1].egress > 0.0


def test_reference_scenario_loads_its_egress_links_near_target(tmp_path):
    config = shipped("reference.json", tmp_path)
    assert len(config.seeds) == 5
    run = ScenarioRun(config.withMethods([]), config.seeds[0])
    carried = {}
    for flow in config.flows:
        first = run._staticPath(run.topology.servers[flow.server].node)[0]
        carried[first] = carried.get(first, 0.0) + flow.generator.target_intensity
    assert carried
    for linkId, load in carried.items():
        assert 0.65 <= load / run.topology.links[linkId].bandwidth <= 0.75


@pytest.mark.slow
def test_capacity_control_holds_the_loss_target_on_the_single_node(tmp_path):
    config = shipped("single_node.json", tmp_path)
    table = ensure_table(config)
    uncontrolled = met = total = 0
    for seed in config.seeds:
        off = ScenarioRun(config.withMethods([]), seed).run()
        on = ScenarioRun(config, seed, table, verifyLedger=True).run()
        uncontrolled += sum(bool(w.lossViolations) for w in off.windows if w.window_index >= config.warmup_windows)
        measured = [w for w in on.windows if w.window_index >= config.warmup_windows]
        met += sum(not w.lossViolations for w in measured)
        total += len(measured)
    assert uncontrolled >= 1
    assert met >= 0.9 * total


@pytest.mark.slow
def test_combined_methods_beat_every_single_method_on_the_reference(tmp_path):
    config = shipped("reference.json", tmp_path)
    report = compare_methods(config, verifyLedger=True).report
    combined = report.row("combined")
    for name in ("capacity_control", "fractal_routing", "load_balancing"):
        single = report.row(name)
        assert combined.loss_pct < single.loss_pct
        assert combined.jitter_ms < single.jitter_ms
        assert combined.imbalance < single.imbalance
        assert combined.utilization <= single.utilization
