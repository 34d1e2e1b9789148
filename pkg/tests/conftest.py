import copy
import json

import numpy as np
import pytest

from fractalqos.lib.file import saveCalibrationTable
from fractalqos.op.capacity import CalibrationGrid, CalibrationTable
from fractalqos.sim.config import parse_scenario
from fractalqos.sim.node import ResourceVector, ServiceClass

GRID = CalibrationGrid(
    rho=(0.3, 0.5, 0.7, 0.9),
    H=(0.5, 0.7, 0.9),
    sigma_var=(0.5, 1.0, 2.0, 4.0),
)


def synthetic_table(saturate_corner: bool = True) -> CalibrationTable:
    """Monotone table rho/(1-rho) * (1 + 4(H-0.5)) * (1 + sigma), optionally saturated at the far corner."""
    rho = np.asarray(GRID.rho)[:, None, None]
    H = np.asarray(GRID.H)[None, :, None]
    sigma = np.asarray(GRID.sigma_var)[None, None, :]
    values = rho / (1 - rho) * (1 + 4 * (H - 0.5)) * (1 + sigma)
    if saturate_corner:
        values[-1, -1, -1] = np.inf
    return CalibrationTable(GRID, values, 0.01, {"source": "synthetic"})


SMALL_SCENARIO = {
    "name": "small",
    "run_length": 2048,
    "window": 512,
    "warmup_windows": 1,
    "seeds": [1],
    "node": {"buffer": 24, "packet_size": 2, "buffer_floor": 8, "buffer_ceiling": 256, "control_margin": 1.2},
    "classes": [
        {"id": "gold", "priority": 0, "tau": 50, "loss": 0.02, "mu": [1.0, 1.0, 1.0]},
        {"id": "bronze", "priority": 1, "tau": 500, "loss": 0.05, "mu": [0.5, 1.0, 0.25]},
    ],
    "topology": {
        "nodes": ["lb", "a", "b"],
        "balancer": "lb",
        "links": [
            {"id": "lb-a", "u": "lb", "v": "a", "base_cost": 1.0, "capacity": 12, "channels": [4]},
            {"id": "lb-b", "u": "lb", "v": "b", "base_cost": 1.0, "capacity": 12, "channels": [4]},
            {"id": "a-b", "u": "a", "v": "b", "base_cost": 1.0, "capacity": 8},
        ],
        "servers": [
            {"id": "s1", "node": "a", "cpu": 8, "net": 10, "ram": 64},
            {"id": "s2", "node": "b", "cpu": 8, "net": 10, "ram": 64},
        ],
    },
    "flows": [
        {"id": "g1", "class": "gold", "server": "s1", "generator": {"H": 0.8, "intensity": 1.5, "weight": 0.7}},
        {"id": "b1", "class": "bronze", "server": "s1", "generator": {"H": 0.6, "intensity": 1.5, "weight": 0.6}},
        {"id": "b2", "class": "bronze", "server": "s1", "generator": {"H": 0.5, "intensity": 1.0}},
    ],
}

SINGLE_NODE = {
    "name": "single",
    "run_length": 2048,
    "window": 512,
    "warmup_windows": 1,
    "seeds": [3],
    "methods": ["capacity_control"],
    "node": {"buffer": 16, "packet_size": 1, "buffer_floor": 16, "buffer_ceiling": 512},
    "classes": [{"id": "data", "priority": 0, "tau": 1000, "loss": 0.01}],
    "topology": {
        "nodes": ["lb", "s"],
        "balancer": "lb",
        "links": [{"id": "lb-s", "u": "lb", "v": "s", "base_cost": 1.0, "capacity": 16, "channels": [4]}],
        "servers": [{"id": "s1", "node": "s", "cpu": 20, "net": 20, "ram": 256}],
    },
    "flows": [
        {"id": "f1", "class": "data", "server": "s1", "generator": {"H": 0.8, "intensity": 5.0, "weight": 0.65}},
    ],
}


@pytest.fixture
def table():
    return synthetic_table()


@pytest.fixture
def classes():
    return [
        ServiceClass("gold", 0, 50.0, 0.01, ResourceVector(1.0, 1.0, 1.0)),
        ServiceClass("silver", 1, 200.0, 0.03, ResourceVector(0.8, 1.0, 0.5)),
        ServiceClass("bronze", 2, 1000.0, 0.05, ResourceVector(0.6, 1.0, 0.25)),
    ]


@pytest.fixture
def small_data():
    return copy.deepcopy(SMALL_SCENARIO)


@pytest.fixture
def small_config(small_data, tmp_path):
    return parse_scenario(small_data, str(tmp_path))


@pytest.fixture
def single_data():
    return copy.deepcopy(SINGLE_NODE)


@pytest.fixture
def single_config(single_data, tmp_path):
    return parse_scenario(single_data, str(tmp_path))


@pytest.fixture
def scenario_file(small_data, tmp_path):
    """Scenario JSON on disk with its calibration table already cached."""
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_data))
    config = parse_scenario(small_data, str(tmp_path))
    saveCalibrationTable(synthetic_table(), config.tablePath())
    return path
