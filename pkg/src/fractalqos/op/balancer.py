import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fractalqos.lib.errors import DegenerateInputError, TraceError
from fractalqos.op.capacity import CalibrationTable
from fractalqos.op.estimators import FractalSignature, signature
from fractalqos.op.traffic import TrafficTrace
from fractalqos.sim.node import RESOURCE_TOLERANCE, ResourceVector, ServiceClass

logger = logging.getLogger(__name__)

RESOURCES = ("cpu", "net", "ram")
HEADROOM_MIN = 1.0
HEADROOM_MAX = 4.0
REFERENCE_RHO = 0.7
MEAN_FLOOR = 0.05
IMPROVEMENT_TOLERANCE = 1e-12
MAX_IMPROVEMENT_ROUNDS = 50
# placements enumerated exactly after the local search
EXACT_SEARCH_LIMIT = 4096
# share of a server's drain rate that placed work may use
DRAIN_UTILIZATION = 0.85


@dataclass(frozen=True)
class NodeLoad:
    server_id: str
    cpu: float = 0.0
    net: float = 0.0
    ram: float = 0.0

    def __post_init__(self):
        for name in RESOURCES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{self.server_id}.{name} utilization must be in [0, 1], got {value}")

    def asTuple(self) -> Tuple[float, float, float]:
        return (self.cpu, self.net, self.ram)

    @classmethod
    def fromUsage(cls, server_id: str, used: ResourceVector, capacity: ResourceVector) -> "NodeLoad":
        return cls(server_id, *(min(max(u, 0.0), 1.0) for u in used.ratio(capacity)))


@dataclass
class ImbalanceReport:
    scores: Dict[str, float]
    system_imbalance: float
    window_index: int = 0


def _imbalance(utilization: np.ndarray) -> float:
    mean = utilization.mean(axis=0)
    # identical columns are exactly balanced, whatever the rounding of std
    std = np.where(np.ptp(utilization, axis=0) == 0, 0.0, utilization.std(axis=0))
    return float(np.mean(std / np.maximum(mean, MEAN_FLOOR)))


def system_imbalance(loads: Sequence[NodeLoad], window_index: int = 0) -> ImbalanceReport:
    """Dispersion of per-resource utilization across nodes, averaged over cpu, net and ram."""
    if not loads:
        raise ValueError("system_imbalance needs at least one node")
    utilization = np.array([load.asTuple() for load in loads], dtype=np.float64)
    mean = utilization.mean(axis=0)
    scores = {
        load.server_id: float(np.max(np.abs(row - mean)))
        for load, row in zip(loads, utilization)
    }
    return ImbalanceReport(scores, _imbalance(utilization), window_index)


def headroom_factor(sig: FractalSignature, table: Optional[CalibrationTable],
                    reference_rho: float = REFERENCE_RHO) -> float:
    if table is None:
        return HEADROOM_MIN
    ratio = table.ratioToBaseline(reference_rho, sig.hurst_H, sig.sigma_var)
    if ratio is None:
        return HEADROOM_MIN
    if math.isinf(ratio):
        return HEADROOM_MAX
    return min(max(ratio, HEADROOM_MIN), HEADROOM_MAX)


def resource_demand(sig: FractalSignature, service_class: ServiceClass, table: CalibrationTable = None,
                    reference_rho: float = REFERENCE_RHO) -> ResourceVector:
    """mu_qs scaled by the flow intensity and the burst headroom of its signature."""
    factor = sig.intensity_lambda * headroom_factor(sig, table, reference_rho)
    return service_class.mu_qs.scale(factor)


@dataclass(frozen=True)
class FlowRequest:
    flow_id: str
    service_class: ServiceClass
    demand: ResourceVector
    rate: float = 0.0


@dataclass(frozen=True)
class FlowAssignment:
    flow_id: str
    qs_id: str
    server_id: str
    reserved: ResourceVector
    window_index: int = 0
    rate: float = 0.0


@dataclass
class AssignmentResult:
    assignments: Dict[str, FlowAssignment]
    forecast: Dict[str, NodeLoad]
    deferred: List[str]
    imbalance: float
    residual: Dict[str, ResourceVector] = field(default_factory=dict)
    drain_slack: Dict[str, float] = field(default_factory=dict)


class _Placement:
    """Dense view of one assignment problem: servers x (cpu, net, ram, work) arrays.

    The work column holds mean work per slot against the rate a server can
    drain; it bounds feasibility only and never enters the imbalance.
    """

    def __init__(self, capacity: Mapping[str, ResourceVector], base: Mapping[str, ResourceVector],
                 drain: Mapping[str, float] = None, work: Mapping[str, float] = None):
        self.serverIds = sorted(capacity)
        drain = drain or {}
        work = work or {}
        self.capacity = np.array([(*capacity[s].asTuple(), drain.get(s, math.inf)) for s in self.serverIds],
                                 dtype=np.float64)
        self.base = np.array([(*base.get(s, ResourceVector.zero()).asTuple(), work.get(s, 0.0))
                              for s in self.serverIds], dtype=np.float64)
        resources = self.capacity[:, :3]
        self.inverse = np.divide(1.0, resources, out=np.zeros_like(resources), where=resources > 0)

    def fits(self, load: np.ndarray, server: int = None) -> bool:
        capacity = self.capacity if server is None else self.capacity[server]
        return bool(np.all(load <= capacity + RESOURCE_TOLERANCE))

    def imbalance(self, load: np.ndarray) -> float:
        return _imbalance(np.clip(load[:, :3] * self.inverse, 0.0, 1.0))

    def loadOf(self, demands: np.ndarray, placement: Sequence[int]) -> np.ndarray:
        load = self.base.copy()
        for f, s in enumerate(placement):
            if s >= 0:
                load[s] += demands[f]
        return load


def _greedy(problem: _Placement, demands: np.ndarray, order: Sequence[int]) -> List[int]:
    placement = [-1] * len(demands)
    load = problem.base.copy()
    for f in order:
        best, bestValue = -1, math.inf
        for s in range(len(problem.serverIds)):
            trial = load.copy()
            trial[s] += demands[f]
            if not problem.fits(trial[s], s):
                continue
            value = problem.imbalance(trial)
            if value < bestValue - IMPROVEMENT_TOLERANCE:
                best, bestValue = s, value
        if best >= 0:
            placement[f] = best
            load[best] += demands[f]
    return placement


def _improve(problem: _Placement, demands: np.ndarray, placement: List[int]) -> List[int]:
    """Single moves and pairwise swaps that strictly lower the imbalance and stay feasible."""
    placement = list(placement)
    load = problem.loadOf(demands, placement)
    current = problem.imbalance(load)
    placed = [f for f, s in enumerate(placement) if s >= 0]
    servers = range(len(problem.serverIds))
    for _ in range(MAX_IMPROVEMENT_ROUNDS):
        improved = False
        for f in placed:
            for s in servers:
                src = placement[f]
                if s == src:
                    continue
                trial = load.copy()
                trial[src] -= demands[f]
                trial[s] += demands[f]
                if not problem.fits(trial[s], s):
                    continue
                value = problem.imbalance(trial)
                if value < current - IMPROVEMENT_TOLERANCE:
                    placement[f], load, current, improved = s, trial, value, True
        for f, g in itertools.combinations(placed, 2):
            a, b = placement[f], placement[g]
            if a == b:
                continue
            trial = load.copy()
            delta = demands[g] - demands[f]
            trial[a] += delta
            trial[b] -= delta
            if not (problem.fits(trial[a], a) and problem.fits(trial[b], b)):
                continue
            value = problem.imbalance(trial)
            if value < current - IMPROVEMENT_TOLERANCE:
                placement[f], placement[g], load, current, improved = b, a, trial, value, True
        if not improved:
            break
    return placement


def _exhaustive(problem: _Placement, demands: np.ndarray, placement: List[int]) -> List[int]:
    placed = [f for f, s in enumerate(placement) if s >= 0]
    servers = len(problem.serverIds)
    if not placed or servers ** len(placed) > EXACT_SEARCH_LIMIT:
        return placement
    best = list(placement)
    bestValue = problem.imbalance(problem.loadOf(demands, best))
    for choice in itertools.product(range(servers), repeat=len(placed)):
        trial = list(placement)
        for f, s in zip(placed, choice):
            trial[f] = s
        load = problem.loadOf(demands, trial)
        if not problem.fits(load):
            continue
        value = problem.imbalance(load)
        if value < bestValue - IMPROVEMENT_TOLERANCE:
            best, bestValue = trial, value
    return best


def assign_flows(
    requests: Sequence[FlowRequest],
    capacity: Mapping[str, ResourceVector],
    base: Mapping[str, ResourceVector] = None,
    window_index: int = 0,
    refine: bool = True,
    drain: Mapping[str, float] = None,
    work: Mapping[str, float] = None,
) -> AssignmentResult:
    """Place flows on servers so that the projected system imbalance is smallest.

    Flows are taken by class priority, then by descending demand; each goes to
    the feasible server with the lowest post-assignment imbalance, ties to the
    lowest server id. `base` is the load already present on each server.
    When `drain` is given, a server also needs room for the flow's rate under
    its drain rate, net of the `work` it already has to clear each slot.
    Flows that fit nowhere are deferred.
    """
    if not capacity:
        raise ValueError("assign_flows needs at least one server")
    problem = _Placement(capacity, base or {}, drain, work)
    demands = np.array([(*r.demand.asTuple(), r.rate) for r in requests], dtype=np.float64).reshape(-1, 4)
    totals = problem.capacity[:, :3].sum(axis=0)
    weights = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    magnitude = demands[:, :3] @ weights if len(requests) else np.zeros(0)
    order = sorted(range(len(requests)),
                   key=lambda f: (requests[f].service_class.priority, -magnitude[f], requests[f].flow_id))

    placement = _greedy(problem, demands, order)
    if refine:
        placement = _exhaustive(problem, demands, _improve(problem, demands, placement))

    load = problem.loadOf(demands, placement)
    assignments, deferred = {}, []
    for f, s in enumerate(placement):
        request = requests[f]
        if s < 0:
            deferred.append(request.flow_id)
            continue
        assignments[request.flow_id] = FlowAssignment(
            request.flow_id, request.service_class.qs_id, problem.serverIds[s], request.demand, window_index,
            request.rate)
    forecast = {}
    residual = {}
    slack = {}
    for s, serverId in enumerate(problem.serverIds):
        used = ResourceVector(*(max(v, 0.0) for v in load[s, :3]))
        forecast[serverId] = NodeLoad.fromUsage(serverId, used, capacity[serverId])
        residual[serverId] = ResourceVector(*(max(v, 0.0) for v in problem.capacity[s, :3] - load[s, :3]))
        slack[serverId] = float(problem.capacity[s, 3] - load[s, 3])
    if deferred:
        logger.warning(f"Window {window_index}: no feasible server for {', '.join(deferred)}; deferred")
    return AssignmentResult(assignments, forecast, deferred, problem.imbalance(load), residual, slack)


@dataclass
class BalancedFlow:
    flow_id: str
    service_class: ServiceClass
    trace: Optional[TrafficTrace]


@dataclass
class BalancerWindowReport:
    window_index: int
    imbalance_before: float
    imbalance_after: float
    assignments: Dict[str, FlowAssignment]
    deferred: List[str]
    sticky: List[str]
    forecast: Dict[str, NodeLoad]
    forecast_error: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)
    correction: Dict[str, ResourceVector] = field(default_factory=dict)

    @property
    def meanForecastError(self) -> Optional[float]:
        if not self.forecast_error:
            return None
        return float(np.mean([v for errors in self.forecast_error.values() for v in errors]))

    def rows(self) -> List[dict]:
        return [
            {
                "window": self.window_index,
                "flow": a.flow_id,
                "class": a.qs_id,
                "server": a.server_id,
                "demand_cpu": a.reserved.cpu,
                "demand_net": a.reserved.net,
                "demand_ram": a.reserved.ram,
                "system_imbalance_before": self.imbalance_before,
                "after": self.imbalance_after,
            }
            for a in sorted(self.assignments.values(), key=lambda a: a.flow_id)
        ]


class DynamicBalancer:
    """Per-window flow placement driven by traffic signatures and measured node loads.

    Each call to balancing_loop runs one window of the procedure: signatures,
    current imbalance, demands, distribution and forecast, application,
    residual correction, feedback of measured loads, advance.

    Servers also bound the mean work placed on them by their drain rate,
    cpu capacity less background, after setting aside what their queued
    backlog needs to clear within `clear_slots` slots.
    """

    def __init__(self, capacity: Mapping[str, ResourceVector], background: Mapping[str, ResourceVector] = None,
                 table: CalibrationTable = None, reference_rho: float = REFERENCE_RHO, refine: bool = True,
                 secondary_balancer: bool = False, clear_slots: int = 1,
                 drain_utilization: float = DRAIN_UTILIZATION):
        if clear_slots < 1:
            raise ValueError(f"clear_slots must be >= 1, got {clear_slots}")
        self.capacity: Dict[str, ResourceVector] = dict(capacity)
        self.background: Dict[str, ResourceVector] = {
            s: (background or {}).get(s, ResourceVector.zero()) for s in self.capacity
        }
        self.table = table
        self.referenceRho = reference_rho
        self.refine = refine
        self.clearSlots = clear_slots
        self.drainUtilization = drain_utilization
        self.assignments: Dict[str, FlowAssignment] = {}
        self.lastServer: Dict[str, str] = {}
        self.forecast: Dict[str, NodeLoad] = {}
        self.correction: Dict[str, ResourceVector] = {}
        self.reports: List[BalancerWindowReport] = []
        self.windowIndex = 0
        if secondary_balancer:
            logger.info("Secondary balancer configured; failover is not modeled")

    def setCapacity(self, server_id: str, capacity: ResourceVector):
        logger.info(f"Server {server_id} capacity set to {capacity}")
        self.capacity[server_id] = capacity

    def serverFor(self, flow_id: str) -> Optional[str]:
        return self.lastServer.get(flow_id)

    def drainRates(self) -> Dict[str, float]:
        """Work per slot each server may take on: its drain rate scaled by the utilization target."""
        return {
            s: max(self.capacity[s].cpu - self.background[s].cpu, 0.0) * self.drainUtilization
            for s in self.capacity
        }

    def _idleLoads(self) -> List[NodeLoad]:
        return [NodeLoad.fromUsage(s, self.background[s], self.capacity[s]) for s in sorted(self.capacity)]

    def _relocate(self, window_index: int, deferred: Sequence[str], rates: Mapping[str, float],
                  slack: Dict[str, float]):
        """Deferred flows hold no reservation; move those whose server cannot drain them."""
        for flowId in deferred:
            rate = rates.get(flowId, 0.0)
            current = self.lastServer.get(flowId)
            if current in slack and slack[current] >= rate:
                slack[current] -= rate
                continue
            target = max(sorted(slack), key=lambda s: slack[s])
            if current is not None and slack.get(current, -math.inf) >= slack[target]:
                target = current
            slack[target] -= rate
            if target != current:
                logger.info(f"Window {window_index}: deferred {flowId} relocated {current} -> {target}")
                self.lastServer[flowId] = target

    def balancing_loop(self, window_index: int, flows: Sequence[BalancedFlow],
                       measured: Mapping[str, NodeLoad] = None,
                       backlog: Mapping[str, float] = None) -> BalancerWindowReport:
        # signatures of the window just observed
        signatures: Dict[str, FractalSignature] = {}
        sticky = []
        for flow in flows:
            try:
                if flow.trace is None:
                    raise TraceError("no traffic observed")
                signatures[flow.flow_id] = signature(flow.trace)
            except (DegenerateInputError, TraceError) as e:
                sticky.append(flow.flow_id)
                logger.warning(f"Window {window_index}: {flow.flow_id} keeps its placement ({e})")

        # measured imbalance before this window's placement
        if measured:
            loads = [measured.get(s) or NodeLoad.fromUsage(s, self.background[s], self.capacity[s])
                     for s in sorted(self.capacity)]
        else:
            loads = self._idleLoads()
        before = system_imbalance(loads, window_index)
        logger.debug(f"Window {window_index}: imbalance before {before.system_imbalance:.4f}")

        # demand per flow
        requests = [
            FlowRequest(flow.flow_id, flow.service_class,
                        resource_demand(signatures[flow.flow_id], flow.service_class, self.table, self.referenceRho),
                        signatures[flow.flow_id].intensity_lambda)
            for flow in flows if flow.flow_id in signatures
        ]

        # sticky flows hold their previous reservation; queued work must clear before new work fits
        base = dict(self.background)
        work = {s: max((backlog or {}).get(s, 0.0), 0.0) / self.clearSlots for s in self.capacity}
        pinned = {}
        for flowId in sticky:
            previous = self.assignments.get(flowId)
            if previous is not None and previous.server_id in self.capacity:
                pinned[flowId] = FlowAssignment(previous.flow_id, previous.qs_id, previous.server_id,
                                                previous.reserved, window_index, previous.rate)
                base[previous.server_id] = base[previous.server_id] + previous.reserved
                work[previous.server_id] += previous.rate
        for serverId, extra in self.correction.items():
            if serverId in base:
                base[serverId] = base[serverId] + extra
        result = assign_flows(requests, self.capacity, base, window_index, self.refine, self.drainRates(), work)

        # apply
        for flowId, assignment in result.assignments.items():
            if self.lastServer.get(flowId) not in (None, assignment.server_id):
                logger.info(f"Window {window_index}: {flowId} moved "
                            f"{self.lastServer[flowId]} -> {assignment.server_id}")
        self.assignments = {**pinned, **result.assignments}
        for flowId, assignment in self.assignments.items():
            self.lastServer[flowId] = assignment.server_id
        self._relocate(window_index, result.deferred, {r.flow_id: r.rate for r in requests},
                       dict(result.drain_slack))

        # slack reserved on nodes whose load exceeded the previous forecast
        errors: Dict[str, Tuple[float, float, float]] = {}
        correction: Dict[str, ResourceVector] = {}
        if measured and self.forecast:
            for serverId, predicted in self.forecast.items():
                load = measured.get(serverId)
                if load is None or serverId not in self.capacity:
                    continue
                errors[serverId] = tuple(abs(m - p) for m, p in zip(load.asTuple(), predicted.asTuple()))
                under = [max(m - p, 0.0) for m, p in zip(load.asTuple(), predicted.asTuple())]
                deficit = ResourceVector(*(u * c for u, c in zip(under, self.capacity[serverId].asTuple())))
                slack = result.residual.get(serverId, ResourceVector.zero())
                shift = ResourceVector(*(min(d, s) for d, s in zip(deficit.asTuple(), slack.asTuple())))
                if any(shift.asTuple()):
                    correction[serverId] = shift

        # carried into the next window
        self.correction = correction
        self.forecast = result.forecast

        report = BalancerWindowReport(
            window_index=window_index,
            imbalance_before=before.system_imbalance,
            imbalance_after=result.imbalance,
            assignments=dict(self.assignments),
            deferred=result.deferred,
            sticky=sticky,
            forecast=result.forecast,
            forecast_error=errors,
            correction=correction,
        )
        logger.debug(f"Window {window_index}: imbalance forecast {result.imbalance:.4f}, "
                     f"{len(result.assignments)} placed, {len(result.deferred)} deferred, {len(sticky)} sticky")
        self.reports.append(report)

        self.windowIndex = window_index + 1
        return report
