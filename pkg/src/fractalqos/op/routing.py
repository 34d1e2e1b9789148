import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import networkx as nx
import numpy as np
from scipy.optimize import linprog

from fractalqos.lib.errors import ConfigError, TraceError
from fractalqos.op.estimators import FractalSignature
from fractalqos.sim.node import ResourceVector

logger = logging.getLogger(__name__)

DEFAULT_C0 = 10.0
DEFAULT_ANNOUNCE_INTERVAL = 1024
DEFAULT_K_PATHS = 3
EPSILON = 1e-9


@dataclass
class Link:
    link_id: str
    u: str
    v: str
    base_cost: float
    capacity: float
    channels: List[float] = field(default_factory=list)
    cost: float = None
    allocated: float = 0.0

    def __post_init__(self):
        if not self.base_cost > 0:
            raise ConfigError(f"topology.links.{self.link_id}.base_cost", f"must be > 0, got {self.base_cost}")
        if not self.capacity > 0:
            raise ConfigError(f"topology.links.{self.link_id}.capacity", f"must be > 0, got {self.capacity}")
        if not self.channels:
            self.channels = [float(self.capacity)]
        if sum(self.channels) > self.capacity + EPSILON:
            raise ConfigError(f"topology.links.{self.link_id}.channels", "channel bandwidths exceed the link capacity")
        if self.cost is None:
            self.cost = float(self.base_cost)

    @property
    def bandwidth(self) -> float:
        """Provisioned bandwidth: the sum of the link's channels."""
        return float(sum(self.channels))

    @property
    def pool(self) -> float:
        return self.capacity - self.bandwidth

    @property
    def residual(self) -> float:
        return self.bandwidth - self.allocated

    def growChannels(self, amount: float) -> float:
        """Move up to `amount` from the link's unprovisioned pool into its channels."""
        granted = max(0.0, min(amount, self.pool))
        if granted > 0:
            self.channels[0] += granted
        return granted

    def endpoints(self) -> Tuple[str, str]:
        return (self.u, self.v)


@dataclass
class ServerSpec:
    server_id: str
    node: str
    capacity: ResourceVector
    background: ResourceVector = ResourceVector.zero()


class Topology:

    def __init__(self, nodes: Iterable[str], links: Iterable[Link], balancer: str = None,
                 servers: Iterable[ServerSpec] = ()):
        self.nodes = list(nodes)
        self.links: Dict[str, Link] = {}
        self.graph = nx.Graph()
        self.graph.add_nodes_from(self.nodes)
        for link in links:
            if link.link_id in self.links:
                raise ConfigError(f"topology.links.{link.link_id}", "duplicate link id")
            for end in link.endpoints():
                if end not in self.graph:
                    raise ConfigError(f"topology.links.{link.link_id}", f"unknown node {end}")
            if self.graph.has_edge(link.u, link.v):
                raise ConfigError(f"topology.links.{link.link_id}", "parallel links are not supported")
            self.links[link.link_id] = link
            self.graph.add_edge(link.u, link.v, link_id=link.link_id)
        self.balancer = balancer
        self.servers: Dict[str, ServerSpec] = {s.server_id: s for s in servers}
        for server in self.servers.values():
            if server.node not in self.graph:
                raise ConfigError(f"topology.servers.{server.server_id}.node", f"unknown node {server.node}")

    @classmethod
    def fromDict(cls, data: dict, prefix: str = "topology") -> "Topology":
        try:
            links = [
                Link(
                    link_id=str(item["id"]),
                    u=str(item["u"]),
                    v=str(item["v"]),
                    base_cost=float(item["base_cost"]),
                    capacity=float(item["capacity"]),
                    channels=[float(c) for c in item.get("channels", [])],
                )
                for item in data["links"]
            ]
            servers = [
                ServerSpec(
                    server_id=str(item["id"]),
                    node=str(item["node"]),
                    capacity=ResourceVector(float(item["cpu"]), float(item["net"]), float(item["ram"])),
                    background=ResourceVector(*(float(v) for v in item.get("background", (0.0, 0.0, 0.0)))),
                )
                for item in data.get("servers", [])
            ]
            return cls(data["nodes"], links, data.get("balancer"), servers)
        except KeyError as e:
            raise ConfigError(f"{prefix}.{e.args[0]}", "missing field") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(prefix, str(e)) from None

    def linkBetween(self, u: str, v: str) -> Link:
        return self.links[self.graph.edges[u, v]["link_id"]]

    def linksOnNodePath(self, nodePath: List[str]) -> Tuple[Link, ...]:
        return tuple(self.linkBetween(a, b) for a, b in zip(nodePath, nodePath[1:]))

    def resetAllocations(self):
        for link in self.links.values():
            link.allocated = 0.0


@dataclass
class Path:
    links: Tuple[Link, ...]
    qs_id: str = None
    netx: float = 0.0
    src: str = None
    dst: str = None

    @property
    def linkIds(self) -> Tuple[str, ...]:
        return tuple(link.link_id for link in self.links)

    @property
    def cost(self) -> float:
        return path_cost(self)

    def bottleneck(self) -> float:
        return min(link.residual for link in self.links)


def path_cost(path: Path) -> float:
    if not path.links:
        raise TraceError("path has no links")
    return float(sum(link.cost for link in path.links))


def update_cost(C: float, H: float, sigma_var: float, C0: float) -> float:
    """Link cost after an announcement given the carried traffic's H and CV."""
    if C < 0:
        raise TraceError(f"C must be >= 0, got {C}")
    if not C0 > 0:
        raise TraceError(f"C0 must be > 0, got {C0}")
    if sigma_var < 0:
        raise TraceError(f"sigma_var must be >= 0, got {sigma_var}")
    if not 0 < H <= 1:
        raise TraceError(f"H must be in (0, 1], got {H}")

    if H <= 0.5:
        return C
    if H >= 0.9 or sigma_var >= 3:
        return C + C0
    if sigma_var <= 1:
        return C + (H - 0.5) * C0
    return C + (H - 0.5) * (sigma_var - 1) * C0


def cost_branch(H: float, sigma_var: float) -> int:
    """Which of the four cost-update branches applies (1-based)."""
    matches = [
        H <= 0.5,
        0.5 < H < 0.9 and sigma_var <= 1,
        0.5 < H < 0.9 and 1 < sigma_var < 3,
        H >= 0.9 or (H > 0.5 and sigma_var >= 3),
    ]
    if sum(matches) != 1:
        raise AssertionError(f"cost branches overlap or miss at H={H}, sigma_var={sigma_var}")
    return matches.index(True) + 1


@dataclass(frozen=True)
class Demand:
    flow_id: str
    src: str
    dst: str
    bandwidth: float
    qs_id: str = None
    priority: int = 0
    lifetime: Optional[int] = None


@dataclass
class RoutingResult:
    assignments: Dict[str, List[Path]] = field(default_factory=dict)
    unrouted: Dict[str, Tuple[float, str]] = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return float(sum(p.cost * p.netx for paths in self.assignments.values() for p in paths))

    def routedBandwidth(self, flow_id: str) -> float:
        return float(sum(p.netx for p in self.assignments.get(flow_id, [])))


class RouteState:
    """Per-flow admissible paths and the bandwidth each path holds on its links."""

    def __init__(self, c0: float = DEFAULT_C0, announceInterval: int = DEFAULT_ANNOUNCE_INTERVAL,
                 kPaths: int = DEFAULT_K_PATHS, multiplexLowPriority: bool = False):
        if announceInterval is None or announceInterval <= 0:
            raise ConfigError("routing.announce_interval", f"must be > 0, got {announceInterval}")
        if not c0 > 0:
            raise ConfigError("routing.c0", f"must be > 0, got {c0}")
        self.c0 = c0
        self.announceInterval = announceInterval
        self.kPaths = kPaths
        self.multiplexLowPriority = multiplexLowPriority
        self.admissible: Dict[str, List[Tuple[str, ...]]] = {}
        self.allocations: Dict[str, List[Path]] = {}
        self.lastCosts: Dict[str, float] = {}

    def clearFlow(self, flow_id: str):
        for path in self.allocations.pop(flow_id, []):
            for link in path.links:
                link.allocated -= path.netx
                if abs(link.allocated) < EPSILON:
                    link.allocated = 0.0

    def record(self, flow_id: str, path: Path):
        for link in path.links:
            link.allocated += path.netx
        self.allocations.setdefault(flow_id, []).append(path)

    def linkAllocations(self) -> Dict[str, float]:
        totals: Dict[str, float] = {}
        for paths in self.allocations.values():
            for path in paths:
                for link in path.links:
                    totals[link.link_id] = totals.get(link.link_id, 0.0) + path.netx
        return totals

    def checkConservation(self, topology: Topology):
        """Per-link Netx sums equal the link's routed bandwidth and stay within its channels."""
        totals = self.linkAllocations()
        for link in topology.links.values():
            routed = totals.get(link.link_id, 0.0)
            if abs(routed - link.allocated) > 1e-6:
                raise AssertionError(f"link {link.link_id}: paths hold {routed}, link records {link.allocated}")
            if link.allocated > link.bandwidth + 1e-6:
                raise AssertionError(f"link {link.link_id}: allocated {link.allocated} over {link.bandwidth}")


def _least_cost_path(topology: Topology, src: str, dst: str, minResidual: float) -> Optional[List[str]]:
    def weight(u, v, attrs):
        link = topology.links[attrs["link_id"]]
        return link.cost if link.residual >= minResidual - EPSILON else None

    try:
        return nx.dijkstra_path(topology.graph, src, dst, weight=weight)
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        return None


def _admissible_paths(topology: Topology, src: str, dst: str, k: int) -> List[List[str]]:
    def weight(u, v, attrs):
        return topology.links[attrs["link_id"]].cost

    try:
        return list(itertools.islice(nx.shortest_simple_paths(topology.graph, src, dst, weight=weight), k))
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        return []


def _projected_wait(links: Iterable[Link], extra: float) -> float:
    worst = 0.0
    for link in links:
        rho = (link.allocated + extra) / link.bandwidth if link.bandwidth > 0 else 1.0
        if rho >= 1:
            return float("inf")
        worst = max(worst, rho / (2 * (1 - rho)))
    return worst


def route_flows(topology: Topology, demands: Iterable[Demand], state: RouteState) -> RoutingResult:
    """Greedy successive least-cost routing under per-link residual bandwidth.

    Demands go in priority order, then by descending bandwidth. Each takes the
    cheapest path that holds it whole; otherwise it is split along successive
    cheapest paths with spare bandwidth and any remainder is reported unrouted.
    """
    ordered = sorted(demands, key=lambda d: (d.priority, -d.bandwidth, d.flow_id))
    lowest = max((d.priority for d in ordered), default=0)
    result = RoutingResult()
    for demand in ordered:
        state.clearFlow(demand.flow_id)
    for demand in ordered:
        state.admissible[demand.flow_id] = [
            tuple(link.link_id for link in topology.linksOnNodePath(p))
            for p in _admissible_paths(topology, demand.src, demand.dst, state.kPaths)
        ]
        if not state.admissible[demand.flow_id]:
            result.unrouted[demand.flow_id] = (demand.bandwidth, "disconnected")
            continue
        if demand.bandwidth <= 0:
            result.assignments[demand.flow_id] = []
            continue

        if (state.multiplexLowPriority and demand.priority == lowest and len(ordered) > 1
                and _multiplex(topology, demand, state, result)):
            continue

        nodePath = _least_cost_path(topology, demand.src, demand.dst, demand.bandwidth)
        if nodePath is not None:
            path = Path(topology.linksOnNodePath(nodePath), demand.qs_id, demand.bandwidth, demand.src, demand.dst)
            state.record(demand.flow_id, path)
            result.assignments[demand.flow_id] = [path]
            continue

        remaining = demand.bandwidth
        paths = []
        while remaining > EPSILON:
            nodePath = _least_cost_path(topology, demand.src, demand.dst, EPSILON * 2)
            if nodePath is None:
                break
            links = topology.linksOnNodePath(nodePath)
            amount = min(remaining, min(link.residual for link in links))
            path = Path(links, demand.qs_id, amount, demand.src, demand.dst)
            state.record(demand.flow_id, path)
            paths.append(path)
            remaining -= amount
        result.assignments[demand.flow_id] = paths
        if remaining > EPSILON:
            result.unrouted[demand.flow_id] = (remaining, "capacity")
            logger.warning(f"Flow {demand.flow_id}: {remaining:.3f} of {demand.bandwidth:.3f} left unrouted")
    return result


def _multiplex(topology: Topology, demand: Demand, state: RouteState, result: RoutingResult) -> bool:
    """Spread a low-priority demand over its admissible paths when one path would outlive it."""
    candidates = [topology.linksOnNodePath(p)
                  for p in _admissible_paths(topology, demand.src, demand.dst, state.kPaths)]
    if len(candidates) < 2 or demand.lifetime is None:
        return False
    best = candidates[0]
    if _projected_wait(best, demand.bandwidth) <= demand.lifetime:
        return False
    share = demand.bandwidth / len(candidates)
    if any(min(link.residual for link in links) < share - EPSILON for links in candidates):
        return False
    paths = []
    for links in candidates:
        path = Path(links, demand.qs_id, share, demand.src, demand.dst)
        state.record(demand.flow_id, path)
        paths.append(path)
    result.assignments[demand.flow_id] = paths
    logger.info(f"Flow {demand.flow_id}: multiplexed over {len(paths)} paths")
    return True


@dataclass
class Announcement:
    slot: int
    costs: Dict[str, float]
    changed: bool


def dominant_signature(
    carried: Dict[str, Tuple[float, Optional[FractalSignature]]],
    aggregate: Optional[FractalSignature] = None,
) -> Optional[FractalSignature]:
    """Signature of the highest-bandwidth flow on a link, else the link's aggregate."""
    ranked = sorted(carried.items(), key=lambda item: (-item[1][0], item[0]))
    for _, (bandwidth, sig) in ranked:
        if bandwidth > 0 and sig is not None:
            return sig
    return aggregate


def announce(state: RouteState, topology: Topology, slot: int,
             linkSignatures: Dict[str, Optional[FractalSignature]]) -> Announcement:
    """Recompute every link cost from its base cost and the signature it carries."""
    if slot % state.announceInterval != 0:
        raise ConfigError("routing.announce_interval",
                          f"slot {slot} is not on the {state.announceInterval}-slot interval")
    before = {k: link.cost for k, link in topology.links.items()}
    for linkId, link in topology.links.items():
        sig = linkSignatures.get(linkId)
        if sig is None:
            link.cost = float(link.base_cost)
        else:
            H = min(max(sig.hurst_H, EPSILON), 1.0)
            link.cost = update_cost(link.base_cost, H, sig.sigma_var, state.c0)
    costs = {k: link.cost for k, link in topology.links.items()}
    changed = costs != before
    state.lastCosts = costs
    if changed:
        logger.info(f"Announcement at slot {slot}: costs {costs}")
    return Announcement(slot, costs, changed)


def brute_force_unsplittable(topology: Topology, demands: List[Demand]) -> Optional[Tuple[float, Dict[str, List[str]]]]:
    """Exhaustive minimum of sum(cost x bandwidth) with one simple path per demand."""
    options = []
    for demand in demands:
        paths = [topology.linksOnNodePath(p) for p in nx.all_simple_paths(topology.graph, demand.src, demand.dst)]
        if not paths:
            return None
        options.append(paths)

    best = None
    for combo in itertools.product(*options):
        load: Dict[str, float] = {}
        for demand, links in zip(demands, combo):
            for link in links:
                load[link.link_id] = load.get(link.link_id, 0.0) + demand.bandwidth
        if any(load[k] > topology.links[k].residual + EPSILON for k in load):
            continue
        objective = sum(d.bandwidth * sum(link.cost for link in links) for d, links in zip(demands, combo))
        if best is None or objective < best[0] - EPSILON:
            best = (objective, {d.flow_id: [link.link_id for link in links] for d, links in zip(demands, combo)})
    return best


def lp_optimum(topology: Topology, demands: List[Demand]) -> Optional[float]:
    """Splittable optimum of sum(cost x Netx) over all simple paths, None if infeasible."""
    variables = []
    for index, demand in enumerate(demands):
        for p in nx.all_simple_paths(topology.graph, demand.src, demand.dst):
            variables.append((index, topology.linksOnNodePath(p)))
    if not variables:
        return None

    costs = np.array([sum(link.cost for link in links) for _, links in variables])
    linkIds = list(topology.links)
    capacityRows = np.zeros((len(linkIds), len(variables)))
    for j, (_, links) in enumerate(variables):
        for link in links:
            capacityRows[linkIds.index(link.link_id), j] = 1.0
    capacities = np.array([topology.links[k].residual for k in linkIds])
    demandRows = np.zeros((len(demands), len(variables)))
    for j, (index, _) in enumerate(variables):
        demandRows[index, j] = 1.0
    bandwidths = np.array([d.bandwidth for d in demands])

    solution = linprog(costs, A_ub=capacityRows, b_ub=capacities, A_eq=demandRows, b_eq=bandwidths,
                       bounds=(0, None), method="highs")
    if not solution.success:
        return None
    return float(solution.fun)
