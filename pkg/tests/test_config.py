import json
import os

import pytest

from fractalqos.lib.errors import ConfigError
from fractalqos.sim.config import ALL_METHODS, Method, load_scenario, parse_scenario


def test_parse_small_scenario(small_config, tmp_path):
    assert small_config.name == "small"
    assert small_config.windows == 4
    assert small_config.trafficLength == 2048
    assert small_config.methods == ALL_METHODS
    assert [c.qs_id for c in small_config.classes] == ["gold", "bronze"]
    assert small_config.serviceClass("bronze").mu_qs.ram == 0.25
    assert small_config.routing.announce_interval == 512
    assert small_config.node.buffer == 24
    flow = small_config.flows[0]
    assert flow.generator.origin_class == "gold"
    assert flow.generator.length == 2048
    # a weight of 0.5 means no cascade
    assert small_config.flows[2].generator.cascade_depth == 0
    assert small_config.tablePath() == os.path.join(str(tmp_path), ".cache", "small_calibration_v1.csv")
    topology = small_config.buildTopology()
    assert set(topology.servers) == {"s1", "s2"}
    with pytest.raises(KeyError):
        small_config.serviceClass("platinum")


def test_generator_span_caps_the_cascade_depth(small_data, tmp_path):
    small_data["flows"][0]["generator"].update(span=64, depth=10)
    generator = parse_scenario(small_data, str(tmp_path)).flows[0].generator
    assert generator.cascade_span == 64
    assert generator.cascade_depth == 6
    assert generator.length == 2048


def test_with_methods_and_seeds(small_config):
    only = small_config.withMethods([Method.LoadBalancing])
    assert only.enabled(Method.LoadBalancing)
    assert not only.enabled(Method.CapacityControl)
    assert small_config.enabled(Method.CapacityControl)
    assert only.withSeeds([4, 5]).seeds == (4, 5)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("run_length"), "run_length"),
        (lambda d: d.update(run_length=1024), "run_length"),
        (lambda d: d.update(window=0), "window"),
        (lambda d: d.update(warmup_windows=4), "warmup_windows"),
        (lambda d: d["classes"][1].update(loss=1.5), "classes.bronze.l_qs"),
        (lambda d: d["classes"][0].update(priority="high"), "classes[0].priority"),
        (lambda d: d["flows"][0].update({"class": "platinum"}), "flows[0].class"),
        (lambda d: d["flows"][1].update(server="s9"), "flows[1].server"),
        (lambda d: d["flows"][2].update(id="g1"), "flows[2].id"),
        (lambda d: d["flows"][0]["generator"].update(H=1.5), "flows[0].generator"),
        (lambda d: d["flows"][0]["generator"].update(span=48), "flows[0].generator"),
        (lambda d: d["flows"][0]["generator"].pop("intensity"), "flows[0].generator.intensity"),
        (lambda d: d.update(methods=["teleport"]), "methods"),
        (lambda d: d["node"].update(control_margin=0.5), "node.control_margin"),
        (lambda d: d["topology"].update(balancer="zz"), "topology.balancer"),
        (lambda d: d["topology"]["servers"][0].update(node="lb"), "topology.servers.s1.node"),
        (lambda d: d.update(capacity_changes=[{"slot": 10, "server": "s3", "scale": 0.5}]),
         "capacity_changes[0].server"),
        (lambda d: d.update(calibration={"grid": {"rho": [0.9, 0.5]}}), "calibration.grid"),
    ],
)
def test_errors_name_the_offending_field(small_data, mutate, field):
    mutate(small_data)
    with pytest.raises(ConfigError) as info:
        parse_scenario(small_data)
    assert info.value.field == field


def test_load_scenario_from_disk(small_data, tmp_path):
    topology = small_data.pop("topology")
    (tmp_path / "topology.json").write_text(json.dumps(topology))
    small_data["topology"] = "topology.json"
    small_data["calibration"] = {"table": "tables/small.csv"}
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(small_data))
    config = load_scenario(str(path))
    assert config.base_dir == str(tmp_path)
    assert config.topology == topology
    assert config.tablePath() == os.path.join(str(tmp_path), "tables", "small.csv")


def test_load_scenario_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError) as info:
        load_scenario(str(broken))
    assert info.value.field == "scenario"


def test_shipped_scenarios_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "scenarios")
    for name in ("reference.json", "high_load.json", "single_node.json"):
        config = load_scenario(os.path.join(root, name))
        assert config.windows >= 4
        assert config.flows
