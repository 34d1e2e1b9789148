import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from fractalqos.lib.errors import TraceError
from fractalqos.lib.util import isPowerOfTwo

logger = logging.getLogger(__name__)

MAX_CASCADE_DEPTH = 24
DEFAULT_BURSTINESS = 0.3
MAX_CASCADE_WEIGHT = 0.95


@dataclass(eq=False)
class TrafficTrace:
    """Per-slot workload series.

    `signed` traces carry raw Gaussian increments and may hold negative values;
    every other trace is nonnegative.
    """

    slots: np.ndarray
    slot_duration: float = 1.0
    origin_class: Optional[str] = None
    signed: bool = False

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.float64)
        if self.slots.ndim != 1 or len(self.slots) < 1:
            raise TraceError("trace must be a non-empty 1-d series")
        if not self.slot_duration > 0:
            raise TraceError(f"slot_duration must be > 0, got {self.slot_duration}")
        if not np.all(np.isfinite(self.slots)):
            raise TraceError("trace holds non-finite values")
        if not self.signed and np.any(self.slots < 0):
            raise TraceError("trace values must be >= 0")

    def __len__(self):
        return len(self.slots)

    def mean(self) -> float:
        return float(self.slots.mean())

    def window(self, start: int, length: int) -> "TrafficTrace":
        return replace(self, slots=self.slots[start:start + length].copy())

    def scaled(self, factor: float) -> "TrafficTrace":
        return replace(self, slots=self.slots * factor)

    def identical(self, other: "TrafficTrace") -> bool:
        return (self.slot_duration == other.slot_duration
                and self.origin_class == other.origin_class
                and np.array_equal(self.slots, other.slots))


@dataclass(frozen=True)
class GeneratorSpec:
    target_H: float
    target_intensity: float
    cascade_depth: int = 0
    cascade_weight: float = 0.5
    length: int = 4096
    seed: int = 0
    burstiness: float = DEFAULT_BURSTINESS
    slot_duration: float = 1.0
    origin_class: Optional[str] = None
    # independent cascades over consecutive blocks of this many slots; None spans the whole trace
    cascade_span: Optional[int] = None

    def validate(self):
        if not 0 < self.target_H < 1:
            raise TraceError(f"target_H must be in (0, 1), got {self.target_H}")
        if not self.target_intensity > 0:
            raise TraceError(f"target_intensity must be > 0, got {self.target_intensity}")
        if self.cascade_depth < 0 or self.cascade_depth > MAX_CASCADE_DEPTH:
            raise TraceError(f"cascade_depth must be in [0, {MAX_CASCADE_DEPTH}], got {self.cascade_depth}")
        if self.length < 2:
            raise TraceError(f"length must be >= 2, got {self.length}")
        if self.cascade_depth > 0:
            if not 0.5 <= self.cascade_weight < 1:
                raise TraceError(f"cascade_weight must be in [0.5, 1), got {self.cascade_weight}")
            if not isPowerOfTwo(self.length):
                raise TraceError(f"length must be a power of two when cascade_depth > 0, got {self.length}")
            if self.length < 2 ** self.cascade_depth:
                raise TraceError(f"length {self.length} is shorter than the cascade 2^{self.cascade_depth}")
            if self.cascade_span is not None:
                if not isPowerOfTwo(self.cascade_span) or self.cascade_span > self.length:
                    raise TraceError(f"cascade_span must be a power of two <= length, got {self.cascade_span}")
                if self.cascade_span < 2 ** self.cascade_depth:
                    raise TraceError(f"cascade_span {self.cascade_span} is shorter than "
                                     f"the cascade 2^{self.cascade_depth}")
        if self.burstiness < 0:
            raise TraceError(f"burstiness must be >= 0, got {self.burstiness}")
        if self.seed < 0:
            raise TraceError(f"seed must be a non-negative integer, got {self.seed}")
        return self

    def withSeed(self, seed: int) -> "GeneratorSpec":
        return replace(self, seed=seed)


def fgn_autocovariance(H: float, lags, sigma: float = 1.0) -> np.ndarray:
    k = np.abs(np.asarray(lags, dtype=np.float64))
    return 0.5 * sigma ** 2 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))


def generate_fgn(H: float, n: int, sigma: float = 1.0, seed: int = 0) -> TrafficTrace:
    """Fractional Gaussian noise by circulant embedding of its autocovariance."""
    if not 0 < H < 1:
        raise TraceError(f"H must be in (0, 1), got {H}")
    if n < 2:
        raise TraceError(f"n must be >= 2, got {n}")
    if not sigma > 0:
        raise TraceError(f"sigma must be > 0, got {sigma}")

    rng = np.random.default_rng(seed)
    if H == 0.5:
        return TrafficTrace(sigma * rng.standard_normal(n), signed=True)

    # first row of the 2n circulant: c(0..n-1), 0, c(n-1..1)
    gamma = fgn_autocovariance(H, np.arange(n))
    row = np.concatenate([gamma, [0.0], gamma[:0:-1]])
    eigenvalues = np.fft.fft(row).real
    if eigenvalues.min() < -1e-10 * eigenvalues.max():
        raise TraceError(f"circulant embedding is not non-negative definite for H={H}, n={n}")
    eigenvalues = np.clip(eigenvalues, 0.0, None)

    m = 2 * n
    z = np.zeros(m, dtype=complex)
    z[0] = rng.standard_normal()
    z[n] = rng.standard_normal()
    v = rng.standard_normal((n - 1, 2))
    z[1:n] = (v[:, 0] + 1j * v[:, 1]) / math.sqrt(2)
    z[n + 1:] = np.conj(z[1:n][::-1])

    increments = math.sqrt(m) * np.fft.ifft(np.sqrt(eigenvalues) * z).real[:n]
    return TrafficTrace(sigma * increments, signed=True)


def generate_cascade(depth: int, weight: float, seed: int = 0) -> TrafficTrace:
    """Conservative binomial cascade of unit mass over 2^depth slots."""
    if not 1 <= depth <= MAX_CASCADE_DEPTH:
        raise TraceError(f"depth must be in [1, {MAX_CASCADE_DEPTH}], got {depth}")
    if not 0.5 < weight < 1:
        raise TraceError(f"weight must be in (0.5, 1), got {weight}")

    rng = np.random.default_rng(seed)
    mass = np.ones(1)
    for _ in range(depth):
        heavyLeft = rng.integers(0, 2, size=len(mass)).astype(bool)
        left = mass * np.where(heavyLeft, weight, 1.0 - weight)
        split = np.empty(2 * len(mass))
        split[0::2] = left
        split[1::2] = mass - left
        mass = split
    return TrafficTrace(mass)


def compose_traffic(spec: GeneratorSpec) -> TrafficTrace:
    """Positive fGn envelope times cascade mass, rescaled to the target intensity."""
    spec.validate()
    fgnSeed, cascadeSeed = np.random.SeedSequence(spec.seed).spawn(2)

    fgn = generate_fgn(spec.target_H, spec.length, 1.0, fgnSeed)
    values = 1.0 + spec.burstiness * fgn.slots

    if spec.cascade_depth > 0 and spec.cascade_weight > 0.5:
        cells = 2 ** spec.cascade_depth
        if spec.cascade_span is None:
            masses = [generate_cascade(spec.cascade_depth, spec.cascade_weight, cascadeSeed).slots]
            span = spec.length
        else:
            span = spec.cascade_span
            masses = [generate_cascade(spec.cascade_depth, spec.cascade_weight, s).slots
                      for s in cascadeSeed.spawn(spec.length // span)]
        values = values * np.concatenate([np.repeat(mass * cells, span // cells) for mass in masses])

    values = np.clip(values, 0.0, None)
    total = values.mean()
    if total <= 0:
        raise TraceError("composed trace has no positive mass")
    values = values * (spec.target_intensity / total)
    return TrafficTrace(values, slot_duration=spec.slot_duration, origin_class=spec.origin_class)


def cascade_cv(weight: float, depth: int, burstiness: float = 0.0) -> float:
    """Nominal coefficient of variation of an envelope-times-cascade trace."""
    second = (2.0 * (weight ** 2 + (1.0 - weight) ** 2)) ** depth
    return math.sqrt(max((1.0 + burstiness ** 2) * second - 1.0, 0.0))


def spec_for_signature(
    H: float,
    sigma_var: float,
    target_intensity: float = 1.0,
    length: int = 4096,
    cascade_depth: int = 10,
    seed: int = 0,
) -> GeneratorSpec:
    """Generator parameters whose output has Hurst index H and nominal CV sigma_var."""
    burstiness = min(DEFAULT_BURSTINESS, sigma_var / 2.0)
    depth = min(cascade_depth, int(math.log2(length)))
    ratio = (1.0 + sigma_var ** 2) / (1.0 + burstiness ** 2)
    spread = ratio ** (1.0 / depth) - 1.0 if depth > 0 else 0.0
    weight = (1.0 + math.sqrt(max(spread, 0.0))) / 2.0
    if weight > MAX_CASCADE_WEIGHT:
        logger.warning(f"Cascade weight {weight:.3f} for sigma_var={sigma_var} clamped to {MAX_CASCADE_WEIGHT}")
        weight = MAX_CASCADE_WEIGHT
    return GeneratorSpec(
        target_H=H,
        target_intensity=target_intensity,
        cascade_depth=depth if weight > 0.5 else 0,
        cascade_weight=weight,
        length=length,
        seed=seed,
        burstiness=burstiness,
    ).validate()
