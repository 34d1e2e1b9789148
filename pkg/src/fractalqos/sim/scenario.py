import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from fractalqos.lib.errors import DegenerateInputError, LedgerError, TraceError
from fractalqos.lib.file import loadCalibrationTable, saveCalibrationTable
from fractalqos.lib.host import HostInfo
from fractalqos.lib.util import Observable
from fractalqos.op.balancer import BalancedFlow, DynamicBalancer, system_imbalance
from fractalqos.op.capacity import CalibrationTable, CapacityController, ControlAction, Calibrator
from fractalqos.op.estimators import FractalSignature, signature
from fractalqos.op.routing import Demand, RouteState, announce, dominant_signature, route_flows
from fractalqos.op.traffic import TrafficTrace, compose_traffic
from fractalqos.sim.config import ALL_METHODS, FlowConfig, Method, ScenarioConfig
from fractalqos.sim.kernel import EventKind, EventRecord, Kernel
from fractalqos.sim.metrics import Report, ReportRow, RunMetrics, WindowMetrics, aggregate_run
from fractalqos.sim.network import Delivery, Network, integer_arrivals, packetize
from fractalqos.sim.node import (
    Packet,
    QueueNode,
    ResourceLedger,
    ResourceVector,
    loss_coefficient,
    mean_wait,
)
from fractalqos.sim.rng import RandomStreams

logger = logging.getLogger(__name__)

# row name -> methods enabled, in report order
COMPARISON_ROWS: Tuple[Tuple[str, frozenset], ...] = (
    ("capacity_control", frozenset({Method.CapacityControl})),
    ("fractal_routing", frozenset({Method.FractalRouting})),
    ("load_balancing", frozenset({Method.LoadBalancing})),
    ("combined", ALL_METHODS),
)
NETWORK = "network"


@dataclass
class RunResult:
    scenario: str
    seed: int
    methods: List[str]
    metrics: RunMetrics
    windows: List[WindowMetrics]
    metricsLog: List[dict] = field(default_factory=list)
    controlLog: List[dict] = field(default_factory=list)
    routingLog: List[dict] = field(default_factory=list)
    balancerLog: List[dict] = field(default_factory=list)
    events: List[tuple] = field(default_factory=list)
    ledgerChecks: int = 0


def method_names(methods) -> List[str]:
    return sorted(m.value for m in methods)


class ScenarioRun:
    """One seeded simulation of a scenario with a fixed set of methods enabled."""

    def __init__(self, config: ScenarioConfig, seed: int, table: CalibrationTable = None,
                 verifyLedger: bool = False, recordEvents: bool = False):
        self.config = config
        self.seed = seed
        self.table = table
        self.verifyLedger = verifyLedger
        self.streams = RandomStreams(seed)
        self.kernel = Kernel(config.slot_duration_ms, recordEvents)
        self.topology = config.buildTopology()
        self.classes = list(config.classes)
        self.flows: Dict[str, FlowConfig] = {f.flow_id: f for f in config.flows}

        node = config.node
        self.balancerNode = QueueNode(
            self.topology.balancer, self.classes, buffer=node.buffer, pEject=node.p_eject,
            storageCapacity=node.storage, rng=self.streams.stream("node/eject"), classCaps=node.class_caps)
        self.network = Network(self.topology, self.balancerNode, self.classes, onDelivery=self._delivered)
        self.ledger = ResourceLedger(
            {k: link.capacity for k, link in self.topology.links.items()},
            {k: s.capacity for k, s in self.topology.servers.items()})

        self.arrivals = self._traffic()
        self.routeState = RouteState(config.routing.c0, config.routing.announce_interval,
                                     config.routing.k_paths, config.routing.multiplex_low_priority)
        self.routes: Dict[str, List[Tuple[Tuple[str, ...], float]]] = {}
        self.sentByPath: Dict[str, List[int]] = {}
        self.lastLinkSignatures: Optional[Dict[str, Optional[FractalSignature]]] = None
        self.lastRouting: Optional[tuple] = None
        self.controller = None
        if config.enabled(Method.CapacityControl):
            if table is None:
                raise ValueError("capacity control needs a calibration table")
            self.controller = CapacityController(table, node.buffer_floor, node.buffer_ceiling, node.control_margin)
        self.balancer = None
        if config.enabled(Method.LoadBalancing):
            self.balancer = DynamicBalancer(
                self.network.serverCapacities(), self.network.serverBackgrounds(), table,
                config.balancer.reference_rho, config.balancer.refine, config.balancer.secondary_balancer,
                clear_slots=config.window)

        self.changes: Dict[int, list] = {}
        for change in config.capacity_changes:
            self.changes.setdefault(change.slot, []).append(change)
        self.nextPacketId = 0
        self.windowDelays: Dict[str, List[int]] = {}
        self.flowDelays: Dict[str, List[int]] = {}
        self.signatures: Dict[str, Optional[FractalSignature]] = {}
        self.lastLoads = {}
        self.windows: List[WindowMetrics] = []
        self.result = RunResult(config.name, seed, method_names(config.methods), None, self.windows)

        self.kernel.on(EventKind.Arrival, self._onArrival)
        self.kernel.on(EventKind.ServiceComplete, self._onService)
        self.kernel.on(EventKind.WindowBoundary, self._onBoundary)
        self.kernel.on(EventKind.Rebalance, self._onRebalance)
        self.kernel.on(EventKind.Announcement, self._onAnnouncement)

    def _traffic(self) -> Dict[str, np.ndarray]:
        arrivals = {}
        length = self.config.trafficLength
        for flowId, flow in self.flows.items():
            # draws depend on (seed, flow) only, never on the enabled methods
            spec = replace(flow.generator, length=length, seed=self.streams.seedFor(f"flow/{flowId}"))
            values = compose_traffic(spec).slots[:self.config.run_length].copy()
            values[:flow.start_slot] = 0.0
            if flow.stop_slot is not None:
                values[flow.stop_slot:] = 0.0
            arrivals[flowId], _ = integer_arrivals(values)
        return arrivals

    def _active(self, flowId: str, start: int, stop: int) -> bool:
        flow = self.flows[flowId]
        return flow.start_slot < stop and (flow.stop_slot is None or flow.stop_slot > start)

    def serverOf(self, flowId: str) -> str:
        if self.balancer is not None:
            assigned = self.balancer.serverFor(flowId)
            if assigned is not None:
                return assigned
        return self.flows[flowId].server

    def _rate(self, flowId: str, windowIndex: int) -> float:
        if windowIndex == 0:
            return self.flows[flowId].generator.target_intensity
        W = self.config.window
        return float(self.arrivals[flowId][(windowIndex - 1) * W:windowIndex * W].mean())

    # routing

    def _staticPath(self, dst: str) -> Tuple[str, ...]:
        def weight(u, v, attrs):
            return self.topology.links[attrs["link_id"]].base_cost

        nodes = nx.shortest_path(self.topology.graph, self.topology.balancer, dst, weight=weight)
        return tuple(link.link_id for link in self.topology.linksOnNodePath(nodes))

    def _routingInputs(self, slot: int, windowIndex: int) -> tuple:
        W = self.config.window
        return tuple((f, self.serverOf(f), self._rate(f, windowIndex))
                     for f in sorted(self.flows) if self._active(f, slot, slot + W))

    def _reroute(self, slot: int, windowIndex: int):
        W = self.config.window
        active = [f for f in sorted(self.flows) if self._active(f, slot, slot + W)]
        self.lastRouting = self._routingInputs(slot, windowIndex)
        for flowId in list(self.routes):
            if flowId not in active:
                self.ledger.releaseFlow(flowId, slot)
                del self.routes[flowId]

        routed = {}
        if self.config.enabled(Method.FractalRouting):
            demands = []
            for flowId in active:
                serviceClass = self.config.serviceClass(self.flows[flowId].qs_id)
                demands.append(Demand(
                    flowId, self.topology.balancer, self.topology.servers[self.serverOf(flowId)].node,
                    self._rate(flowId, windowIndex), serviceClass.qs_id, serviceClass.priority,
                    serviceClass.lifetimeSlots))
            result = route_flows(self.topology, demands, self.routeState)
            for flowId, paths in result.assignments.items():
                total = sum(p.netx for p in paths)
                if total > 0:
                    routed[flowId] = [(p.linkIds, p.netx / total) for p in paths]

        for flowId in active:
            server = self.serverOf(flowId)
            routes = routed.get(flowId) or [(self._staticPath(self.topology.servers[server].node), 1.0)]
            if routes != self.routes.get(flowId):
                self.sentByPath[flowId] = [0] * len(routes)
            self.routes[flowId] = routes
            rate = self._rate(flowId, windowIndex)
            links: Dict[str, float] = {}
            for linkIds, share in routes:
                for linkId in linkIds:
                    links[linkId] = links.get(linkId, 0.0) + rate * share
            reserved = ResourceVector.zero()
            if self.balancer is not None and flowId in self.balancer.assignments:
                reserved = self.balancer.assignments[flowId].reserved
            self.ledger.releaseFlow(flowId, slot)
            self.ledger.allocate(flowId, self.flows[flowId].qs_id, slot, links, routes[0][0], server, reserved)
            for linkIds, share in routes:
                self.result.routingLog.append({
                    "seed": self.seed,
                    "slot": slot,
                    "flow": flowId,
                    "server": server,
                    "path": ">".join(linkIds),
                    "share": share,
                    "cost": sum(self.topology.links[k].cost for k in linkIds),
                })

    def _pickPath(self, flowId: str, size: int) -> Tuple[str, ...]:
        routes = self.routes[flowId]
        if len(routes) == 1:
            return routes[0][0]
        sent = self.sentByPath[flowId]
        total = sum(sent) + size
        # the path furthest behind its share takes the packet
        index = max(range(len(routes)), key=lambda i: (routes[i][1] * total - sent[i], -i))
        sent[index] += size
        return routes[index][0]

    # event handlers

    def _onArrival(self, event: EventRecord):
        flowId = event.entity
        flow = self.flows[flowId]
        serviceClass = self.config.serviceClass(flow.qs_id)
        destination = self.serverOf(flowId)
        for size in packetize(event.payload, self.config.node.packet_size):
            packet = Packet(
                packet_id=self.nextPacketId,
                qs_id=serviceClass.qs_id,
                priority=serviceClass.priority,
                size=size,
                arrival_slot=event.slot,
                deadline_slot=event.slot + serviceClass.lifetimeSlots,
                flow_id=flowId,
                hops=self._pickPath(flowId, size),
                destination=destination,
            )
            self.nextPacketId += 1
            self.network.inject(packet, event.slot)

    def _onService(self, event: EventRecord):
        for change in self.changes.get(event.slot, ()):
            self.network.scaleServer(change.server, change.scale)
            if self.balancer is not None:
                self.balancer.setCapacity(change.server, self.network.servers[change.server].capacity)
        self.network.step(event.slot)
        if self.verifyLedger:
            self.network.checkConservation()
            self.result.ledgerChecks += 1

    def _delivered(self, delivery: Delivery):
        self.windowDelays.setdefault(delivery.flow_id, []).append(delivery.delay)

    def _closeWindow(self, windowIndex: int):
        W = self.config.window
        usage = self.network.closeWindow()
        self.balancerNode.closeWindow(windowIndex)
        loss = {c.qs_id: loss_coefficient(self.balancerNode, c.qs_id, windowIndex) for c in self.classes}
        wait = {c.qs_id: mean_wait(self.balancerNode, c.qs_id, windowIndex) for c in self.classes}
        stats = self.balancerNode.history[windowIndex]
        loads = [usage.server_loads[k] for k in sorted(usage.server_loads)]
        metrics = WindowMetrics(
            window_index=windowIndex,
            utilization=usage.busiestChannel,
            received=sum(s.received for s in stats.values()),
            lost=sum(s.lost for s in stats.values()),
            imbalance=system_imbalance(loads, windowIndex).system_imbalance if loads else 0.0,
            loss=loss,
            wait=wait,
            buffer=self.balancerNode.buffer,
            egress=sum(link.bandwidth for link in self.network.egressLinks()),
        )
        self.windows.append(metrics)
        self.result.metricsLog.append({"seed": self.seed, **metrics.asRecord()})
        if windowIndex >= self.config.warmup_windows:
            for flowId, delays in self.windowDelays.items():
                self.flowDelays.setdefault(flowId, []).extend(delays)
        self.windowDelays = {}

        start = windowIndex * W
        self.signatures = {}
        for flowId in sorted(self.flows) if self.config.enabled(Method.FractalRouting) else ():
            trace = TrafficTrace(self.arrivals[flowId][start:start + W].astype(np.float64))
            try:
                self.signatures[flowId] = signature(trace)
            except (DegenerateInputError, TraceError):
                self.signatures[flowId] = None
        self.lastLoads = usage.server_loads
        return metrics

    def _control(self, windowIndex: int):
        W = self.config.window
        start = windowIndex * W
        aggregate = sum(self.arrivals[f][start:start + W] for f in sorted(self.flows)).astype(np.float64)
        egress = self.network.egressLinks()
        currentNet = sum(link.bandwidth for link in egress)
        decision = self.controller.control_step(
            windowIndex, TrafficTrace(aggregate), self.balancerNode.buffer, currentNet)
        if decision.action in (ControlAction.GrowBuffer, ControlAction.Both):
            self.balancerNode.resize(int(decision.recommended_buffer))
        if decision.action in (ControlAction.GrowCapacity, ControlAction.Both):
            extra = decision.recommended_net - currentNet
            granted = 0.0
            for link in egress:
                # no provisioned egress: split evenly over the links' pools
                share = link.bandwidth / currentNet if currentNet > 0 else 1.0 / len(egress)
                granted += link.growChannels(extra * share)
            if granted < extra - 1e-9:
                logger.warning(f"Window {windowIndex}: capacity pool short by {extra - granted:.2f}")
        self.result.controlLog.append({"seed": self.seed, **decision.asRecord()})

    def _onBoundary(self, event: EventRecord):
        slot = event.slot
        W = self.config.window
        windowIndex = slot // W
        if windowIndex > 0:
            self._closeWindow(windowIndex - 1)
            if self.controller is not None:
                self._control(windowIndex - 1)
        if slot >= self.config.windows * W:
            return

        announcing = (self.config.enabled(Method.FractalRouting) and windowIndex > 0
                      and slot % self.config.routing.announce_interval == 0)
        if windowIndex == 0:
            self._reroute(slot, 0)
        else:
            if self.balancer is not None:
                self.kernel.scheduleAt(slot, EventKind.Rebalance, "balancer", {"window": windowIndex})
            if announcing:
                self.kernel.scheduleAt(slot, EventKind.Announcement, "routing", {"window": windowIndex})
            if self.balancer is None and not announcing:
                self._reroute(slot, windowIndex)

        for s in range(slot, slot + W):
            for flowId in sorted(self.flows):
                work = int(self.arrivals[flowId][s])
                if work > 0:
                    self.kernel.scheduleAt(s, EventKind.Arrival, flowId, work)
            self.kernel.scheduleAt(s, EventKind.ServiceComplete, NETWORK)
        self.kernel.scheduleAt(slot + W, EventKind.WindowBoundary, "window", {"window": windowIndex + 1})

    def _onRebalance(self, event: EventRecord):
        windowIndex = event.payload["window"]
        W = self.config.window
        start = (windowIndex - 1) * W
        flows = []
        for flowId in sorted(self.flows):
            if not self._active(flowId, event.slot, event.slot + W):
                continue
            trace = TrafficTrace(self.arrivals[flowId][start:start + W].astype(np.float64))
            flows.append(BalancedFlow(flowId, self.config.serviceClass(self.flows[flowId].qs_id), trace))
        report = self.balancer.balancing_loop(windowIndex, flows, self.lastLoads, self.network.serverBacklogs())
        self.result.balancerLog.extend({"seed": self.seed, **row} for row in report.rows())
        if not self.config.enabled(Method.FractalRouting) or event.slot % self.config.routing.announce_interval:
            self._reroute(event.slot, windowIndex)

    def _onAnnouncement(self, event: EventRecord):
        windowIndex = event.payload["window"]
        carried: Dict[str, Dict[str, tuple]] = {k: {} for k in self.topology.links}
        for flowId, routes in self.routes.items():
            rate = self._rate(flowId, windowIndex)
            for linkIds, share in routes:
                for linkId in linkIds:
                    carried[linkId][flowId] = (rate * share, self.signatures.get(flowId))
        linkSignatures = {k: dominant_signature(flows) for k, flows in carried.items()}
        unchanged = linkSignatures == self.lastLinkSignatures
        if unchanged and self._routingInputs(event.slot, windowIndex) == self.lastRouting:
            logger.debug(f"Announcement at slot {event.slot}: signatures and demands unchanged; routes kept")
            return
        self.lastLinkSignatures = linkSignatures
        announce(self.routeState, self.topology, event.slot, linkSignatures)
        self._reroute(event.slot, windowIndex)

    def run(self) -> RunResult:
        total = self.config.windows * self.config.window
        logger.info(f"Run {self.config.name} seed {self.seed} methods {'+'.join(self.result.methods) or 'none'}")
        self.kernel.scheduleAt(0, EventKind.WindowBoundary, "window", {"window": 0})
        self.kernel.runUntil(total + 1)
        self.network.checkConservation()

        self.ledger.releaseAll(total)
        if not self.ledger.balanced() or self.ledger.outstanding():
            raise LedgerError(f"resource ledger of {self.config.name} seed {self.seed} did not balance")

        measured = [w for w in self.windows if w.window_index >= self.config.warmup_windows]
        totals = {}
        for c in self.classes:
            received = lost = waitSum = waitCount = 0
            for w in measured:
                stats = self.balancerNode.history[w.window_index][c.qs_id]
                received += stats.received
                lost += stats.lost
                waitSum += stats.waitSum
                waitCount += stats.waitCount
            totals[c.qs_id] = (received, lost, waitSum, waitCount)
        bounds = {c.qs_id: (c.l_qs, c.tau_qs) for c in self.classes}
        self.result.metrics = aggregate_run(measured, self.flowDelays, bounds, totals, self.config.slot_duration_ms)
        self.result.events = list(self.kernel.eventLog)
        logger.info(f"Run {self.config.name} seed {self.seed}: loss {self.result.metrics.loss_pct:.3f}% "
                    f"imbalance {self.result.metrics.imbalance:.3f}")
        return self.result


def _table_state(table: Optional[CalibrationTable]):
    if table is None:
        return None
    return (table.grid, table.values, table.lossTarget, table.metadata)


def _run_task(args) -> Tuple[str, RunResult]:
    rowName, config, seed, tableState, verifyLedger, recordEvents = args
    table = CalibrationTable(*tableState) if tableState is not None else None
    return rowName, ScenarioRun(config, seed, table, verifyLedger, recordEvents).run()


def needs_table(config: ScenarioConfig) -> bool:
    return config.enabled(Method.CapacityControl) or config.enabled(Method.LoadBalancing)


def ensure_table(config: ScenarioConfig, observer=None, workers: int = None) -> CalibrationTable:
    """Load the scenario's calibration table, calibrating and caching it on first use."""
    path = config.tablePath()
    if os.path.exists(path):
        return loadCalibrationTable(path)
    logger.info(f"Calibration table {path} not found; calibrating")
    calibration = config.calibration
    calibrator = Calibrator(calibration.grid, calibration.loss_target, calibration.seeds, calibration.length,
                            calibration.cascade_depth, config.window, workers=workers)
    if observer is not None:
        calibrator.addObserver(observer)
    table = calibrator.run()
    saveCalibrationTable(table, path)
    return table


class Comparison(Observable):
    """Runs (row, seed) simulations, inline or in a process pool, and merges them by row order."""

    def __init__(self, config: ScenarioConfig, rows: Sequence[Tuple[str, frozenset]], table: CalibrationTable = None,
                 verifyLedger: bool = False, recordEvents: bool = False, workers: int = None):
        super().__init__()
        self.config = config
        self.rows = list(rows)
        self.table = table
        self.verifyLedger = verifyLedger
        self.recordEvents = recordEvents
        self.workers = workers
        self.results: Dict[str, List[RunResult]] = {}
        self.report: Optional[Report] = None

    def run(self) -> Report:
        state = _table_state(self.table)
        tasks = [
            (name, self.config.withMethods(methods), seed, state, self.verifyLedger, self.recordEvents)
            for name, methods in self.rows
            for seed in self.config.seeds
        ]
        workers = HostInfo().getWorkerCount(self.workers, len(tasks))
        self.startJob(len(tasks), "simulating")
        collected: Dict[str, List[RunResult]] = {name: [] for name, _ in self.rows}
        if workers == 1:
            for task in tasks:
                self.checkInterrupt()
                name, result = _run_task(task)
                collected[name].append(result)
                self.updateJob(1)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_task, task) for task in tasks]
                try:
                    for future in as_completed(futures):
                        name, result = future.result()
                        collected[name].append(result)
                        self.updateJob(1)
                        self.checkInterrupt()
                finally:
                    for future in futures:
                        future.cancel()

        report = Report()
        for name, methods in self.rows:
            runs = sorted(collected[name], key=lambda r: r.seed)
            self.results[name] = runs
            report.rows.append(ReportRow(name, method_names(methods), [r.seed for r in runs],
                                         [r.metrics for r in runs]))
        self.finishJob()
        return report


def run_scenario(config: ScenarioConfig, table: CalibrationTable = None, verifyLedger: bool = False,
                 recordEvents: bool = False, workers: int = None) -> Tuple[Report, List[RunResult]]:
    """Simulate the scenario with its configured methods over every seed; one averaged report row."""
    if table is None and needs_table(config):
        table = ensure_table(config, workers=workers)
    name = "+".join(method_names(config.methods)) or "none"
    comparison = Comparison(config, [(name, config.methods)], table, verifyLedger, recordEvents, workers)
    report = comparison.run()
    return report, comparison.results[name]


def compare_methods(config: ScenarioConfig, table: CalibrationTable = None, verifyLedger: bool = False,
                    recordEvents: bool = False, workers: int = None, observer=None) -> Comparison:
    """Each method alone and all three together, on identical traffic; returns the finished comparison."""
    if table is None:
        table = ensure_table(config, workers=workers)
    comparison = Comparison(config, COMPARISON_ROWS, table, verifyLedger, recordEvents, workers)
    if observer is not None:
        comparison.addObserver(observer)
    comparison.report = comparison.run()
    return comparison
