import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from fractalqos.lib.errors import DegenerateInputError, TraceError
from fractalqos.op.traffic import TrafficTrace

logger = logging.getLogger(__name__)

DEFAULT_Q_GRID = (-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0)
MIN_SIGNATURE_WINDOW = 512
MIN_SCALE = 16
MAX_DROPPED_FRACTION = 0.5
# fluctuations below this fraction of the profile's range are numerically zero
ZERO_FLUCTUATION = 1e-13


class EstimatorMethod(Enum):
    # moments of block deviations of the integrated series from a straight line
    Fluctuation = "fluctuation"
    # moments of lagged increments of the integrated series
    Structure = "structure"


@dataclass(frozen=True)
class GeneralizedHurstFit:
    q_grid: Tuple[float, ...]
    slopes: Tuple[float, ...]
    intercepts: Tuple[float, ...]
    r_squared: Tuple[float, ...]
    scale_range: Tuple[int, int]
    method: EstimatorMethod = EstimatorMethod.Fluctuation
    dropped_fraction: Tuple[float, ...] = ()

    def h(self, q: float) -> float:
        try:
            return self.slopes[self.q_grid.index(float(q))]
        except ValueError:
            raise TraceError(f"q={q} is not on the fitted grid {self.q_grid}") from None

    def hq(self) -> Dict[float, float]:
        return dict(zip(self.q_grid, self.slopes))

    def rows(self) -> List[dict]:
        return [
            {"q": q, "h_q": h, "log_c_q": c, "r_squared": r2}
            for q, h, c, r2 in zip(self.q_grid, self.slopes, self.intercepts, self.r_squared)
        ]


@dataclass(frozen=True)
class FractalSignature:
    intensity_lambda: float
    hurst_H: float
    hq_samples: Dict[float, float]
    delta_h: float
    sigma_var: float
    window_len: int
    delta_h_raw: float = field(default=0.0, compare=False)

    def asRecord(self) -> dict:
        record = {
            "intensity_lambda": self.intensity_lambda,
            "hurst_H": self.hurst_H,
            "delta_h": self.delta_h,
            "sigma_var": self.sigma_var,
            "window_len": self.window_len,
        }
        for q, h in self.hq_samples.items():
            record[f"h({q:g})"] = h
        return record


def default_scales(n: int) -> List[int]:
    """Powers of two from 16 up to max(n/16, 128), capped at n/4."""
    upper = min(max(n // 16, 128), n // 4)
    scales = []
    s = MIN_SCALE
    while s <= upper:
        scales.append(s)
        s *= 2
    return scales


def _profile(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values - values.mean())


def _block_fluctuations(profile: np.ndarray, s: int) -> np.ndarray:
    """Mean squared residual of each length-s block around its least-squares line.

    Blocks are taken from both ends so a remainder at either end is still used.
    """
    n = len(profile)
    count = n // s
    blocks = profile[:count * s].reshape(count, s)
    if n % s:
        blocks = np.vstack([blocks, profile[n - count * s:].reshape(count, s)])

    t = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
    centered = blocks - blocks.mean(axis=1, keepdims=True)
    slope = centered @ t / (t @ t)
    residual = centered - slope[:, None] * t
    return np.sqrt(np.mean(residual ** 2, axis=1))


def _lagged_increments(profile: np.ndarray, s: int) -> np.ndarray:
    return np.abs(profile[s:] - profile[:-s])


def _log_moment(magnitudes: np.ndarray, q: float, floor: float) -> Tuple[float, float]:
    """log mean |x|^q and the fraction of zero magnitudes dropped for q < 0."""
    if q < 0:
        keep = magnitudes > floor
        dropped = 1.0 - keep.mean()
        magnitudes = magnitudes[keep]
    else:
        dropped = 0.0
    if len(magnitudes) == 0:
        return -math.inf, dropped
    with np.errstate(divide="ignore"):
        logs = np.log(magnitudes)
    return float(logsumexp(q * logs) - math.log(len(magnitudes))), dropped


def _regress(x: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ssTot = float(np.sum((y - y.mean()) ** 2))
    ssRes = float(np.sum((y - fitted) ** 2))
    r2 = 1.0 if ssTot == 0 else 1.0 - ssRes / ssTot
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def estimate_generalized_hurst(
    trace: TrafficTrace,
    q_grid: Sequence[float] = DEFAULT_Q_GRID,
    scales: Sequence[int] = None,
    method: EstimatorMethod = EstimatorMethod.Fluctuation,
) -> GeneralizedHurstFit:
    """Fit E|X(s)|^q = c(q) s^{q h(q)} across scales for every q on the grid."""
    values = np.asarray(trace.slots, dtype=np.float64)
    n = len(values)
    qGrid = tuple(float(q) for q in q_grid)
    if not qGrid:
        raise TraceError("q_grid is empty")
    if 0.0 in qGrid:
        raise TraceError("q_grid must not contain 0")
    scales = sorted(set(int(s) for s in (scales if scales is not None else default_scales(n))))
    if len(scales) < 4:
        raise TraceError(f"need at least 4 distinct scales, got {scales} for a trace of {n} slots")
    minScale = 3 if method == EstimatorMethod.Fluctuation else 1
    if scales[0] < minScale:
        raise TraceError(f"scales must be >= {minScale} for the {method.value} method")
    if n < 4 * scales[-1]:
        raise TraceError(f"trace of {n} slots is shorter than 4 x max scale {scales[-1]}")
    if np.ptp(values) == 0:
        raise DegenerateInputError("constant trace has no fluctuations to scale")

    profile = _profile(values)
    floor = ZERO_FLUCTUATION * float(np.max(np.abs(profile)))
    measure = _block_fluctuations if method == EstimatorMethod.Fluctuation else _lagged_increments

    logS = np.empty((len(qGrid), len(scales)))
    dropped = np.zeros(len(qGrid))
    for j, s in enumerate(scales):
        magnitudes = measure(profile, s)
        for i, q in enumerate(qGrid):
            logS[i, j], fraction = _log_moment(magnitudes, q, floor)
            dropped[i] = max(dropped[i], fraction)

    worst = float(dropped.max())
    if worst > MAX_DROPPED_FRACTION or not np.all(np.isfinite(logS)):
        raise DegenerateInputError(f"{worst:.0%} of fluctuations are zero; negative moments are undefined")
    if worst > 0:
        logger.debug(f"Dropped up to {worst:.2%} zero fluctuations for negative q")

    logScales = np.log(np.asarray(scales, dtype=np.float64))
    slopes, intercepts, r2s = [], [], []
    for i, q in enumerate(qGrid):
        slope, intercept, r2 = _regress(logScales, logS[i])
        slopes.append(slope / q)
        intercepts.append(intercept)
        r2s.append(r2)

    return GeneralizedHurstFit(
        q_grid=qGrid,
        slopes=tuple(slopes),
        intercepts=tuple(intercepts),
        r_squared=tuple(r2s),
        scale_range=(scales[0], scales[-1]),
        method=method,
        dropped_fraction=tuple(float(d) for d in dropped),
    )


def hurst_range(fit: GeneralizedHurstFit) -> float:
    if -5.0 not in fit.q_grid or 5.0 not in fit.q_grid:
        raise TraceError(f"hurst_range needs q=-5 and q=5 on the grid, got {fit.q_grid}")
    return fit.h(-5.0) - fit.h(5.0)


def coefficient_of_variation(trace: TrafficTrace) -> float:
    values = np.asarray(trace.slots, dtype=np.float64)
    if len(values) == 0:
        raise TraceError("empty trace")
    mean = values.mean()
    if mean <= 0:
        raise TraceError(f"coefficient of variation needs a positive mean, got {mean}")
    return float(values.std() / mean)


def hurst_exponent_h2(trace: TrafficTrace, scales: Sequence[int] = None) -> float:
    return estimate_generalized_hurst(trace, (2.0,), scales).h(2.0)


def signature(
    trace: TrafficTrace,
    q_grid: Sequence[float] = DEFAULT_Q_GRID,
    scales: Sequence[int] = None,
    method: EstimatorMethod = EstimatorMethod.Fluctuation,
) -> FractalSignature:
    n = len(trace)
    if n < MIN_SIGNATURE_WINDOW:
        raise TraceError(f"signature needs at least {MIN_SIGNATURE_WINDOW} slots, got {n}")
    qGrid = sorted(set(float(q) for q in q_grid) | {2.0})
    fit = estimate_generalized_hurst(trace, qGrid, scales, method)
    hq = fit.hq()
    deltaRaw = hq[qGrid[0]] - hq[qGrid[-1]]
    return FractalSignature(
        intensity_lambda=float(np.mean(trace.slots)),
        hurst_H=hq[2.0],
        hq_samples=hq,
        delta_h=max(deltaRaw, 0.0),
        sigma_var=coefficient_of_variation(trace),
        window_len=n,
        delta_h_raw=deltaRaw,
    )


def window_signatures(trace: TrafficTrace, window: int, **kwargs) -> List[FractalSignature]:
    """Signature of every complete consecutive window of the trace."""
    return [
        signature(trace.window(start, window), **kwargs)
        for start in range(0, len(trace) - window + 1, window)
    ]


def analytic_cascade_hq(weight: float, q: float) -> float:
    """Generalized Hurst exponent of the fixed-weight binomial cascade."""
    tau = -math.log2(weight ** q + (1.0 - weight) ** q)
    return (tau + 1.0) / q


def analytic_cascade_delta_h(weight: float) -> float:
    return analytic_cascade_hq(weight, -5.0) - analytic_cascade_hq(weight, 5.0)
