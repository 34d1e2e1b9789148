import bisect
import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from fractalqos.lib.errors import DegenerateInputError, SaturationError, TraceError
from fractalqos.lib.host import HostInfo
from fractalqos.lib.util import Observable
from fractalqos.op.estimators import FractalSignature, signature
from fractalqos.op.traffic import TrafficTrace, compose_traffic, spec_for_signature
from fractalqos.sim.rng import RandomStreams

logger = logging.getLogger(__name__)

TABLE_VERSION = 1
DEFAULT_LOSS_TARGET = 0.01
DEFAULT_RHO_GRID = (0.3, 0.5, 0.7, 0.8, 0.9, 0.95)
DEFAULT_H_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SIGMA_GRID = (0.5, 1.0, 2.0, 3.0, 4.0)
DEFAULT_SEEDS = 10
DEFAULT_LENGTH = 8192
DEFAULT_CASCADE_DEPTH = 10
DEFAULT_WINDOW = 1024
# candidate buffers evaluated per bracketing round
PROBES_PER_ROUND = 15
SEARCH_ROUNDS = 4


@dataclass(frozen=True)
class CalibrationGrid:
    rho: Tuple[float, ...] = DEFAULT_RHO_GRID
    H: Tuple[float, ...] = DEFAULT_H_GRID
    sigma_var: Tuple[float, ...] = DEFAULT_SIGMA_GRID

    def validate(self):
        for name in ("rho", "H", "sigma_var"):
            axis = getattr(self, name)
            if len(axis) == 0:
                raise TraceError(f"calibration grid axis {name} is empty")
            if list(axis) != sorted(set(axis)):
                raise TraceError(f"calibration grid axis {name} must be strictly increasing, got {axis}")
        if min(self.rho) <= 0:
            raise TraceError("rho grid values must be > 0")
        if not all(0 < h < 1 for h in self.H):
            raise TraceError("H grid values must be in (0, 1)")
        if min(self.sigma_var) < 0:
            raise TraceError("sigma_var grid values must be >= 0")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (len(self.rho), len(self.H), len(self.sigma_var))


@dataclass(frozen=True)
class TableQuery:
    value: float
    clamped: bool = False
    saturated: bool = False

    def require(self) -> float:
        if self.saturated:
            raise SaturationError("calibration table is saturated for this query; grow capacity instead")
        return self.value


class CalibrationTable:
    """Minimal normalized buffer (units of mean work per slot) meeting the loss target."""

    def __init__(self, grid: CalibrationGrid, values: np.ndarray, lossTarget: float, metadata: dict = None):
        self.grid = grid
        self.values = np.asarray(values, dtype=np.float64).reshape(grid.shape)
        self.lossTarget = lossTarget
        self.metadata = dict(metadata or {})
        points = (np.asarray(grid.rho), np.asarray(grid.H), np.asarray(grid.sigma_var))
        saturated = ~np.isfinite(self.values)
        finite = np.where(saturated, 0.0, self.values)
        self._value = self._interpolator(points, finite)
        self._saturation = self._interpolator(points, saturated.astype(np.float64))

    @staticmethod
    def _interpolator(points, values):
        # singleton axes cannot be interpolated; pad them with a copy
        padded = []
        for axis, pts in enumerate(points):
            if len(pts) == 1:
                pts = np.array([pts[0], pts[0] + 1.0])
                values = np.concatenate([values, values], axis=axis)
            padded.append(pts)
        return RegularGridInterpolator(tuple(padded), values, method="linear")

    @property
    def saturated(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    def cell(self, i: int, j: int, k: int) -> float:
        return float(self.values[i, j, k])

    def lookup(self, rho: float, H: float, sigma_var: float) -> TableQuery:
        """Multilinear interpolation in (rho, H, sigma_var), clamped to the grid."""
        point = []
        clamped = False
        for value, axis in zip((rho, H, sigma_var), (self.grid.rho, self.grid.H, self.grid.sigma_var)):
            bounded = min(max(value, axis[0]), axis[-1])
            clamped = clamped or bounded != value
            point.append(bounded)
        if self._saturation([point])[0] > 0:
            return TableQuery(math.inf, clamped, True)
        return TableQuery(float(self._value([point])[0]), clamped, False)

    def ratioToBaseline(self, rho: float, H: float, sigma_var: float,
                        baselineH: float = 0.5, baselineSigma: float = 0.5) -> Optional[float]:
        cell = self.lookup(rho, H, sigma_var)
        base = self.lookup(rho, baselineH, baselineSigma)
        if cell.saturated:
            return math.inf
        if base.saturated or base.value <= 0:
            return None
        return cell.value / base.value

    def isIsotonic(self) -> bool:
        v = np.where(self.saturated, np.inf, self.values)
        for axis in range(3):
            steps = np.diff(v, axis=axis)
            if not np.all((steps >= 0) | np.isnan(steps)):
                return False
        return True


def isotonic(values: np.ndarray) -> np.ndarray:
    """Smallest array above `values` that is non-decreasing along every axis."""
    result = np.where(np.isfinite(values), values, np.inf)
    for axis in range(result.ndim):
        result = np.maximum.accumulate(result, axis=axis)
    return result


def fluid_loss(traces: np.ndarray, service: np.ndarray, buffers: np.ndarray) -> np.ndarray:
    """Fraction of offered work lost by a finite-buffer queue.

    traces has shape (seeds, slots); service and buffers broadcast against each
    other to the probe shape. Arrivals join the buffer before the slot's service,
    as in the simulated nodes. Returns losses of shape (seeds, *probe shape).
    """
    service, buffers = np.broadcast_arrays(np.asarray(service, dtype=np.float64),
                                           np.asarray(buffers, dtype=np.float64))
    seeds = traces.shape[0]
    shape = (seeds,) + service.shape
    extra = (1,) * service.ndim
    q = np.zeros(shape)
    lost = np.zeros(shape)
    for t in range(traces.shape[1]):
        x = q + traces[:, t].reshape((seeds,) + extra)
        over = x - buffers
        np.maximum(over, 0.0, out=over)
        lost += over
        x -= over
        x -= service
        np.maximum(x, 0.0, out=q)
    offered = traces.sum(axis=1).reshape((seeds,) + extra)
    return lost / offered


def _required_buffers(traces: np.ndarray, rhos: Sequence[float], lossTarget: float, maxBuffer: float) -> np.ndarray:
    """Smallest buffer per utilization whose seed-mean loss meets the target; inf when unreachable."""
    rhos = np.asarray(rhos, dtype=np.float64)
    result = np.full(len(rhos), np.inf)
    active = rhos < 1.0
    if not active.any():
        return result
    service = 1.0 / rhos[active]

    meanLoss = fluid_loss(traces, service, np.full(len(service), maxBuffer)).mean(axis=0)
    reachable = meanLoss <= lossTarget
    lo = np.zeros(len(service))
    hi = np.full(len(service), maxBuffer)
    fraction = np.linspace(0.0, 1.0, PROBES_PER_ROUND + 2)[1:-1]
    for _ in range(SEARCH_ROUNDS):
        probes = lo[:, None] + (hi - lo)[:, None] * fraction[None, :]
        losses = fluid_loss(traces, service[:, None], probes).mean(axis=0)
        ok = losses <= lossTarget
        for i in range(len(service)):
            feasible = np.flatnonzero(ok[i])
            if len(feasible):
                first = feasible[0]
                hi[i] = probes[i, first]
                lo[i] = probes[i, first - 1] if first > 0 else lo[i]
            else:
                lo[i] = probes[i, -1]
    # zero buffer can already suffice at light load
    zeroOk = fluid_loss(traces, service, np.zeros(len(service))).mean(axis=0) <= lossTarget
    values = np.where(zeroOk, 0.0, hi)
    result[np.flatnonzero(active)] = np.where(reachable, values, np.inf)
    return result


def _calibrate_pair(args) -> Tuple[int, int, np.ndarray]:
    j, k, H, sigma, rhos, lossTarget, seeds, length, depth, maxBuffer, masterSeed = args
    streams = RandomStreams(masterSeed)
    traces = np.vstack([
        compose_traffic(spec_for_signature(
            H, sigma, 1.0, length, depth, streams.seedFor(f"calibration/H={H}/sigma={sigma}/{r}"))).slots
        for r in range(seeds)
    ])
    return j, k, _required_buffers(traces, rhos, lossTarget, maxBuffer)


class Calibrator(Observable):

    def __init__(
        self,
        grid: CalibrationGrid = CalibrationGrid(),
        lossTarget: float = DEFAULT_LOSS_TARGET,
        seeds: int = DEFAULT_SEEDS,
        length: int = DEFAULT_LENGTH,
        cascadeDepth: int = DEFAULT_CASCADE_DEPTH,
        window: int = DEFAULT_WINDOW,
        maxBufferNorm: float = None,
        masterSeed: int = 0,
        workers: int = None,
    ):
        super().__init__()
        if not 0 < lossTarget <= 0.2:
            raise TraceError(f"loss_target must be in (0, 0.2], got {lossTarget}")
        if seeds < 1:
            raise TraceError(f"seeds must be >= 1, got {seeds}")
        self.grid = grid.validate()
        self.lossTarget = lossTarget
        self.seeds = seeds
        self.length = length
        self.cascadeDepth = cascadeDepth
        self.window = window
        self.maxBufferNorm = maxBufferNorm if maxBufferNorm is not None else length / 2
        self.masterSeed = masterSeed
        self.workers = workers

    def run(self) -> CalibrationTable:
        tasks = [
            (j, k, H, sigma, self.grid.rho, self.lossTarget, self.seeds, self.length,
             self.cascadeDepth, self.maxBufferNorm, self.masterSeed)
            for j, H in enumerate(self.grid.H)
            for k, sigma in enumerate(self.grid.sigma_var)
        ]
        raw = np.full(self.grid.shape, np.inf)
        workers = HostInfo().getWorkerCount(self.workers, len(tasks))
        self.startJob(len(tasks), "calibrating")
        logger.info(f"Calibrating {np.prod(self.grid.shape)} cells x {self.seeds} seeds on {workers} worker(s)")

        if workers == 1:
            for task in tasks:
                self.checkInterrupt()
                j, k, column = _calibrate_pair(task)
                raw[:, j, k] = column
                self.updateJob(1)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_calibrate_pair, task) for task in tasks]
                try:
                    for future in as_completed(futures):
                        j, k, column = future.result()
                        raw[:, j, k] = column
                        self.updateJob(1)
                        self.checkInterrupt()
                finally:
                    for future in futures:
                        future.cancel()

        values = isotonic(raw)
        saturated = int((~np.isfinite(values)).sum())
        if saturated:
            logger.warning(f"{saturated} calibration cells are saturated")
        self.finishJob()
        return CalibrationTable(self.grid, values, self.lossTarget, {
            "version": TABLE_VERSION,
            "loss_target": self.lossTarget,
            "seeds": self.seeds,
            "window": self.window,
            "length": self.length,
            "cascade_depth": self.cascadeDepth,
            "max_buffer_norm": self.maxBufferNorm,
            "master_seed": self.masterSeed,
        })


def calibrate(grid: CalibrationGrid = CalibrationGrid(), loss_target: float = DEFAULT_LOSS_TARGET,
              seeds: int = DEFAULT_SEEDS, **kwargs) -> CalibrationTable:
    return Calibrator(grid, loss_target, seeds, **kwargs).run()


def required_buffer(table: CalibrationTable, Net: float, lam: float, H: float, sigma_var: float) -> TableQuery:
    """Q_w^new = f(Net, lambda, H, sigma_var) in work units."""
    if lam <= 0:
        return TableQuery(0.0)
    if Net <= 0 or lam >= Net:
        return TableQuery(math.inf, False, True)
    query = table.lookup(lam / Net, H, sigma_var)
    if query.clamped:
        logger.debug(f"Table query rho={lam / Net:.3f} H={H:.3f} sigma={sigma_var:.3f} clamped to the grid")
    if query.saturated:
        return query
    return TableQuery(query.value * lam, query.clamped, False)


def required_capacity(table: CalibrationTable, Q_w: float, lam: float, H: float, sigma_var: float) -> TableQuery:
    """Net^new = phi(Q_w, lambda, H, sigma_var): the smallest capacity whose required buffer fits Q_w."""
    rhos = table.grid.rho
    if lam <= 0:
        return TableQuery(0.0)
    upper = lam / rhos[0]
    if Q_w <= 0:
        return TableQuery(upper, True, False)

    # normalized buffer along the rho axis at this (H, sigma_var); non-decreasing in rho
    norms = [table.lookup(rho, H, sigma_var) for rho in rhos]
    limit = Q_w / lam * (1 + 1e-12)
    feasible = [q.value <= limit and not q.saturated for q in norms]
    if not feasible[0]:
        return TableQuery(upper, True, False)
    if feasible[-1]:
        return TableQuery(lam / rhos[-1], norms[-1].clamped, False)

    # binary search for the last feasible grid point, then solve inside its segment
    last = bisect.bisect_left([not f for f in feasible], True) - 1
    lo, hi = norms[last], norms[last + 1]
    rho = rhos[last]
    if not hi.saturated and hi.value > lo.value:
        rho = rhos[last] + (limit - lo.value) / (hi.value - lo.value) * (rhos[last + 1] - rhos[last])
        rho = min(max(rho, rhos[last]), rhos[last + 1])
    return TableQuery(lam / rho, lo.clamped, False)


class ControlAction(Enum):
    Nothing = "none"
    GrowBuffer = "grow_buffer"
    GrowCapacity = "grow_capacity"
    Both = "both"


@dataclass
class ControlDecision:
    window_index: int
    signature: Optional[FractalSignature]
    current_buffer: float
    current_net: float
    recommended_buffer: float
    recommended_net: float
    action: ControlAction = ControlAction.Nothing
    flags: List[str] = field(default_factory=list)

    def asRecord(self) -> dict:
        sig = self.signature
        return {
            "window": self.window_index,
            "lambda": sig.intensity_lambda if sig else float("nan"),
            "H": sig.hurst_H if sig else float("nan"),
            "sigma_var": sig.sigma_var if sig else float("nan"),
            "delta_h": sig.delta_h if sig else float("nan"),
            "buffer": self.current_buffer,
            "net": self.current_net,
            "buffer_new": self.recommended_buffer,
            "net_new": self.recommended_net,
            "action": self.action.value,
            "flags": "|".join(self.flags),
        }


def decide_action(current_buffer: float, current_net: float, buffer_new: float, net_new: float) -> ControlAction:
    growBuffer = buffer_new > current_buffer
    growNet = net_new > current_net
    if growBuffer and growNet:
        return ControlAction.Both
    if growBuffer:
        return ControlAction.GrowBuffer
    if growNet:
        return ControlAction.GrowCapacity
    return ControlAction.Nothing


class CapacityController:
    """Window-by-window buffer and capacity sizing from the calibration table.

    The buffer grows first, up to its ceiling; capacity grows when the ceiling
    or a saturated table region stops the buffer from absorbing the load.
    Nothing is ever shrunk.
    """

    def __init__(self, table: CalibrationTable, bufferFloor: float = 0, bufferCeiling: float = None,
                 margin: float = 1.0):
        self.table = table
        self.bufferFloor = bufferFloor
        self.bufferCeiling = bufferCeiling
        self.margin = margin
        self.decisions: List[ControlDecision] = []

    def control_step(self, windowIndex: int, trace: TrafficTrace, currentBuffer: float,
                     currentNet: float) -> ControlDecision:
        try:
            sig = signature(trace)
        except (DegenerateInputError, TraceError) as e:
            logger.warning(f"Window {windowIndex}: estimation failed ({e}); no control action")
            decision = ControlDecision(windowIndex, None, currentBuffer, currentNet, currentBuffer, currentNet,
                                       ControlAction.Nothing, ["degenerate"])
            self.decisions.append(decision)
            return decision

        flags = []
        lam, H, sigma = sig.intensity_lambda, sig.hurst_H, sig.sigma_var
        needed = required_buffer(self.table, currentNet, lam, H, sigma)
        if needed.clamped:
            flags.append("clamped")
        if needed.saturated:
            flags.append("saturated")
            bufferNew = currentBuffer
        else:
            bufferNew = math.ceil(needed.value * self.margin)
            if self.bufferCeiling is not None and bufferNew > self.bufferCeiling:
                flags.append("ceiling")
                bufferNew = self.bufferCeiling
        bufferNew = max(bufferNew, self.bufferFloor)

        effective = max(bufferNew, currentBuffer)
        capacity = required_capacity(self.table, effective / self.margin, lam, H, sigma)
        if capacity.clamped and "clamped" not in flags:
            flags.append("clamped")
        netNew = capacity.value
        if netNew <= currentNet * (1 + 1e-9):
            netNew = min(netNew, currentNet)

        decision = ControlDecision(windowIndex, sig, currentBuffer, currentNet, bufferNew, netNew,
                                   decide_action(currentBuffer, currentNet, bufferNew, netNew), flags)
        if decision.action != ControlAction.Nothing:
            logger.info(f"Window {windowIndex}: {decision.action.value} buffer {currentBuffer}->{bufferNew} "
                        f"net {currentNet:.2f}->{netNew:.2f}")
        self.decisions.append(decision)
        return decision
