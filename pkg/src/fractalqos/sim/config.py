import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, Optional, Tuple

from fractalqos.lib.errors import ConfigError, TraceError
from fractalqos.op.balancer import REFERENCE_RHO
from fractalqos.op.capacity import (
    DEFAULT_CASCADE_DEPTH,
    DEFAULT_LENGTH,
    DEFAULT_LOSS_TARGET,
    DEFAULT_SEEDS,
    CalibrationGrid,
)
from fractalqos.op.routing import DEFAULT_ANNOUNCE_INTERVAL, DEFAULT_C0, DEFAULT_K_PATHS, Topology
from fractalqos.op.traffic import MAX_CASCADE_DEPTH, GeneratorSpec, spec_for_signature
from fractalqos.sim.node import DEFAULT_P_EJECT, ResourceVector, ServiceClass

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 1024
DEFAULT_WARMUP_WINDOWS = 2
MIN_WINDOWS = 4
DEFAULT_PACKET_SIZE = 4
DEFAULT_CONTROL_MARGIN = 1.0
DEFAULT_CACHE_DIR = ".cache"


def traffic_length(run_length: int) -> int:
    """Power-of-two generator length covering a run."""
    return 1 << max(1, math.ceil(math.log2(run_length)))


class Method(Enum):
    CapacityControl = "capacity_control"
    FractalRouting = "fractal_routing"
    LoadBalancing = "load_balancing"


ALL_METHODS: FrozenSet[Method] = frozenset(Method)


@dataclass(frozen=True)
class NodeConfig:
    buffer: int = 64
    p_eject: float = DEFAULT_P_EJECT
    storage: int = 0
    packet_size: int = DEFAULT_PACKET_SIZE
    buffer_floor: int = 0
    buffer_ceiling: Optional[int] = None
    control_margin: float = DEFAULT_CONTROL_MARGIN
    class_caps: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class FlowConfig:
    flow_id: str
    qs_id: str
    server: str
    generator: GeneratorSpec
    start_slot: int = 0
    stop_slot: Optional[int] = None


@dataclass(frozen=True)
class RoutingConfig:
    c0: float = DEFAULT_C0
    announce_interval: int = DEFAULT_ANNOUNCE_INTERVAL
    k_paths: int = DEFAULT_K_PATHS
    multiplex_low_priority: bool = False


@dataclass(frozen=True)
class BalancerConfig:
    reference_rho: float = REFERENCE_RHO
    secondary_balancer: bool = False
    refine: bool = True


@dataclass(frozen=True)
class CalibrationConfig:
    table: str = None
    loss_target: float = DEFAULT_LOSS_TARGET
    grid: CalibrationGrid = CalibrationGrid()
    seeds: int = DEFAULT_SEEDS
    length: int = DEFAULT_LENGTH
    cascade_depth: int = DEFAULT_CASCADE_DEPTH


@dataclass(frozen=True)
class CapacityChange:
    slot: int
    server: str
    scale: float


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    run_length: int
    classes: Tuple[ServiceClass, ...]
    topology: Dict[str, Any]
    flows: Tuple[FlowConfig, ...]
    window: int = DEFAULT_WINDOW
    warmup_windows: int = DEFAULT_WARMUP_WINDOWS
    seeds: Tuple[int, ...] = (0,)
    methods: FrozenSet[Method] = ALL_METHODS
    slot_duration_ms: float = 1.0
    node: NodeConfig = NodeConfig()
    routing: RoutingConfig = RoutingConfig()
    balancer: BalancerConfig = BalancerConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    capacity_changes: Tuple[CapacityChange, ...] = ()
    base_dir: str = "."

    @property
    def windows(self) -> int:
        return self.run_length // self.window

    @property
    def trafficLength(self) -> int:
        return traffic_length(self.run_length)

    def enabled(self, method: Method) -> bool:
        return method in self.methods

    def withMethods(self, methods: Iterable[Method]) -> "ScenarioConfig":
        return replace(self, methods=frozenset(methods))

    def withSeeds(self, seeds: Iterable[int]) -> "ScenarioConfig":
        return replace(self, seeds=tuple(seeds))

    def serviceClass(self, qs_id: str) -> ServiceClass:
        for serviceClass in self.classes:
            if serviceClass.qs_id == qs_id:
                return serviceClass
        raise KeyError(qs_id)

    def buildTopology(self) -> Topology:
        return Topology.fromDict(self.topology)

    def tablePath(self) -> str:
        if self.calibration.table:
            return self.resolve(self.calibration.table)
        return os.path.join(self.base_dir, DEFAULT_CACHE_DIR, f"{self.name}_calibration_v1.csv")

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def validate(self) -> "ScenarioConfig":
        if self.window <= 0:
            raise ConfigError("window", f"must be > 0, got {self.window}")
        if self.run_length < MIN_WINDOWS * self.window:
            raise ConfigError("run_length", f"must cover at least {MIN_WINDOWS} windows of {self.window} slots,"
                                            f" got {self.run_length}")
        if not 0 <= self.warmup_windows < self.windows:
            raise ConfigError("warmup_windows", f"must be in [0, {self.windows}), got {self.warmup_windows}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.slot_duration_ms > 0:
            raise ConfigError("slot_duration_ms", f"must be > 0, got {self.slot_duration_ms}")
        if self.node.packet_size <= 0:
            raise ConfigError("node.packet_size", f"must be > 0, got {self.node.packet_size}")
        if self.node.buffer <= 0:
            raise ConfigError("node.buffer", f"must be > 0, got {self.node.buffer}")
        if self.node.control_margin < 1:
            raise ConfigError("node.control_margin", f"must be >= 1, got {self.node.control_margin}")
        if self.node.buffer_ceiling is not None and self.node.buffer_ceiling < self.node.buffer_floor:
            raise ConfigError("node.buffer_ceiling", "must be >= node.buffer_floor")
        if self.routing.announce_interval <= 0:
            raise ConfigError("routing.announce_interval", f"must be > 0, got {self.routing.announce_interval}")
        if not self.routing.c0 > 0:
            raise ConfigError("routing.c0", f"must be > 0, got {self.routing.c0}")
        if self.routing.k_paths < 1:
            raise ConfigError("routing.k_paths", f"must be >= 1, got {self.routing.k_paths}")
        if not 0 < self.calibration.loss_target < 1:
            raise ConfigError("calibration.loss_target", f"must be in (0, 1), got {self.calibration.loss_target}")
        try:
            self.calibration.grid.validate()
        except TraceError as e:
            raise ConfigError("calibration.grid", str(e)) from None

        topology = self.buildTopology()
        if topology.balancer is None or topology.balancer not in topology.graph:
            raise ConfigError("topology.balancer", "must name a node of the topology")
        if not topology.servers:
            raise ConfigError("topology.servers", "at least one server is required")
        for server in topology.servers.values():
            if server.node == topology.balancer:
                raise ConfigError(f"topology.servers.{server.server_id}.node", "must differ from the balancer node")
        classIds = {c.qs_id for c in self.classes}
        if len(classIds) != len(self.classes):
            raise ConfigError("classes", "duplicate class id")
        flowIds = set()
        for i, flow in enumerate(self.flows):
            if flow.flow_id in flowIds:
                raise ConfigError(f"flows[{i}].id", f"duplicate flow id {flow.flow_id}")
            flowIds.add(flow.flow_id)
            if flow.qs_id not in classIds:
                raise ConfigError(f"flows[{i}].class", f"unknown class {flow.qs_id}")
            if flow.server not in topology.servers:
                raise ConfigError(f"flows[{i}].server", f"unknown server {flow.server}")
            if flow.start_slot < 0 or (flow.stop_slot is not None and flow.stop_slot <= flow.start_slot):
                raise ConfigError(f"flows[{i}].stop_slot", "must follow start_slot")
        for i, change in enumerate(self.capacity_changes):
            if change.server not in topology.servers:
                raise ConfigError(f"capacity_changes[{i}].server", f"unknown server {change.server}")
            if not change.scale > 0:
                raise ConfigError(f"capacity_changes[{i}].scale", f"must be > 0, got {change.scale}")
            if not 0 <= change.slot < self.run_length:
                raise ConfigError(f"capacity_changes[{i}].slot", f"must be in [0, {self.run_length})")
        return self


def _get(data: dict, key: str, path: str, kind=None, default=...):
    if key not in data:
        if default is ...:
            raise ConfigError(f"{path}{key}", "missing field")
        return default
    value = data[key]
    if kind is None or value is None:
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}{key}", f"expected {kind.__name__}, got {value!r}") from None


def _parse_class(data: dict, path: str) -> ServiceClass:
    qs_id = _get(data, "id", path, str)
    mu = _get(data, "mu", path, default=(1.0, 1.0, 1.0))
    try:
        muVector = ResourceVector(*(float(v) for v in mu))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}mu", str(e)) from None
    return ServiceClass(
        qs_id=qs_id,
        priority=_get(data, "priority", path, int),
        tau_qs=_get(data, "tau", path, float),
        l_qs=_get(data, "loss", path, float),
        mu_qs=muVector,
        lifetime=_get(data, "lifetime", path, int, None),
    )


def _parse_generator(data: dict, path: str, length: int, qs_id: str) -> GeneratorSpec:
    H = _get(data, "H", path, float)
    intensity = _get(data, "intensity", path, float)
    span = _get(data, "span", path, int, None)
    reach = span if span is not None and 2 <= span <= length else length
    depth = min(_get(data, "depth", path, int, DEFAULT_CASCADE_DEPTH), MAX_CASCADE_DEPTH, int(math.log2(reach)))
    try:
        if "sigma_var" in data:
            spec = spec_for_signature(H, _get(data, "sigma_var", path, float), intensity, length, depth)
        else:
            weight = _get(data, "weight", path, float, 0.5)
            spec = GeneratorSpec(
                target_H=H,
                target_intensity=intensity,
                cascade_depth=depth if weight > 0.5 else 0,
                cascade_weight=weight,
                length=length,
                burstiness=_get(data, "burstiness", path, float, 0.3),
            )
        spec = replace(spec, cascade_span=span, origin_class=qs_id).validate()
    except TraceError as e:
        raise ConfigError(path.rstrip("."), str(e)) from None
    return spec


def _load_topology(value, baseDir: str) -> Dict[str, Any]:
    if isinstance(value, dict):
        data = value
    elif isinstance(value, str):
        path = value if os.path.isabs(value) else os.path.join(baseDir, value)
        if not os.path.exists(path):
            raise ConfigError("topology", f"file not found: {path}")
        with open(path, "r") as f:
            data = json.load(f)
    else:
        raise ConfigError("topology", "must be an object or a file path")
    Topology.fromDict(data)
    return data


def parse_scenario(data: dict, baseDir: str = ".") -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a decoded scenario document."""
    runLength = _get(data, "run_length", "", int)
    window = _get(data, "window", "", int, DEFAULT_WINDOW)
    if window <= 0:
        raise ConfigError("window", f"must be > 0, got {window}")
    if runLength < MIN_WINDOWS * window:
        raise ConfigError("run_length", f"must cover at least {MIN_WINDOWS} windows of {window} slots, got {runLength}")
    length = traffic_length(runLength)

    classes = tuple(_parse_class(item, f"classes[{i}].") for i, item in enumerate(_get(data, "classes", "")))
    flows = []
    for i, item in enumerate(_get(data, "flows", "")):
        path = f"flows[{i}]."
        qs_id = _get(item, "class", path, str)
        flows.append(FlowConfig(
            flow_id=_get(item, "id", path, str),
            qs_id=qs_id,
            server=_get(item, "server", path, str),
            generator=_parse_generator(_get(item, "generator", path), f"{path}generator.", length, qs_id),
            start_slot=_get(item, "start_slot", path, int, 0),
            stop_slot=_get(item, "stop_slot", path, int, None),
        ))

    methods = _get(data, "methods", "", default=[m.value for m in Method])
    try:
        methodSet = frozenset(Method(m) for m in methods)
    except ValueError as e:
        raise ConfigError("methods", str(e)) from None

    node = data.get("node", {})
    routing = data.get("routing", {})
    balancer = data.get("balancer", {})
    calibration = data.get("calibration", {})
    grid = calibration.get("grid", {})
    config = ScenarioConfig(
        name=_get(data, "name", "", str, "scenario"),
        run_length=runLength,
        window=window,
        warmup_windows=_get(data, "warmup_windows", "", int, DEFAULT_WARMUP_WINDOWS),
        seeds=tuple(int(s) for s in _get(data, "seeds", "", default=[0])),
        methods=methodSet,
        slot_duration_ms=_get(data, "slot_duration_ms", "", float, 1.0),
        node=NodeConfig(
            buffer=_get(node, "buffer", "node.", int, 64),
            p_eject=_get(node, "p_eject", "node.", float, DEFAULT_P_EJECT),
            storage=_get(node, "storage", "node.", int, 0),
            packet_size=_get(node, "packet_size", "node.", int, DEFAULT_PACKET_SIZE),
            buffer_floor=_get(node, "buffer_floor", "node.", int, 0),
            buffer_ceiling=_get(node, "buffer_ceiling", "node.", int, None),
            control_margin=_get(node, "control_margin", "node.", float, DEFAULT_CONTROL_MARGIN),
            class_caps={str(k): int(v) for k, v in node.get("class_caps", {}).items()},
        ),
        classes=classes,
        topology=_load_topology(_get(data, "topology", ""), baseDir),
        flows=tuple(flows),
        routing=RoutingConfig(
            c0=_get(routing, "c0", "routing.", float, DEFAULT_C0),
            announce_interval=_get(routing, "announce_interval", "routing.", int, window),
            k_paths=_get(routing, "k_paths", "routing.", int, DEFAULT_K_PATHS),
            multiplex_low_priority=_get(routing, "multiplex_low_priority", "routing.", bool, False),
        ),
        balancer=BalancerConfig(
            reference_rho=_get(balancer, "reference_rho", "balancer.", float, REFERENCE_RHO),
            secondary_balancer=_get(balancer, "secondary_balancer", "balancer.", bool, False),
            refine=_get(balancer, "refine", "balancer.", bool, True),
        ),
        calibration=CalibrationConfig(
            table=_get(calibration, "table", "calibration.", str, None),
            loss_target=_get(calibration, "loss_target", "calibration.", float, DEFAULT_LOSS_TARGET),
            grid=CalibrationGrid(
                rho=tuple(float(v) for v in grid.get("rho", CalibrationGrid().rho)),
                H=tuple(float(v) for v in grid.get("H", CalibrationGrid().H)),
                sigma_var=tuple(float(v) for v in grid.get("sigma_var", CalibrationGrid().sigma_var)),
            ),
            seeds=_get(calibration, "seeds", "calibration.", int, DEFAULT_SEEDS),
            length=_get(calibration, "length", "calibration.", int, DEFAULT_LENGTH),
            cascade_depth=_get(calibration, "cascade_depth", "calibration.", int, DEFAULT_CASCADE_DEPTH),
        ),
        capacity_changes=tuple(
            CapacityChange(
                slot=_get(item, "slot", f"capacity_changes[{i}].", int),
                server=_get(item, "server", f"capacity_changes[{i}].", str),
                scale=_get(item, "scale", f"capacity_changes[{i}].", float),
            )
            for i, item in enumerate(data.get("capacity_changes", []))
        ),
        base_dir=baseDir,
    )
    return config.validate()


def load_scenario(path: str) -> ScenarioConfig:
    if not os.path.exists(path):
        raise ConfigError("scenario", f"file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("scenario", f"{path}: {e}") from None
    logger.info(f"Loaded scenario {data.get('name', path)} from {path}")
    return parse_scenario(data, os.path.dirname(os.path.abspath(path)))
