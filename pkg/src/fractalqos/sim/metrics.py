import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from fractalqos.sim.node import LossResult, WaitResult

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "row",
    "methods",
    "seeds",
    "windows",
    "utilization",
    "loss_pct",
    "jitter_ms",
    "imbalance",
    "loss_compliant",
    "wait_compliant",
    "violations",
)


def compute_jitter(delays: Sequence[float]) -> Optional[float]:
    """Mean absolute difference of consecutive delays; None with fewer than two."""
    if len(delays) < 2:
        return None
    return float(np.mean(np.abs(np.diff(np.asarray(delays, dtype=np.float64)))))


@dataclass
class WindowMetrics:
    window_index: int
    utilization: float
    received: int
    lost: int
    imbalance: float
    loss: Dict[str, LossResult] = field(default_factory=dict)
    wait: Dict[str, WaitResult] = field(default_factory=dict)
    buffer: int = 0
    egress: float = 0.0

    @property
    def lossViolations(self) -> List[str]:
        return sorted(qs for qs, result in self.loss.items() if result.violated)

    def asRecord(self) -> dict:
        record = {
            "window": self.window_index,
            "utilization": self.utilization,
            "received": self.received,
            "lost": self.lost,
            "imbalance": self.imbalance,
            "buffer": self.buffer,
            "egress": self.egress,
        }
        for qs in sorted(self.loss):
            record[f"loss_{qs}"] = self.loss[qs].value
        for qs in sorted(self.wait):
            value = self.wait[qs].value
            record[f"wait_{qs}"] = float("nan") if value is None else value
        return record


@dataclass
class RunMetrics:
    """Aggregates of one seeded run over the windows after warm-up."""

    utilization: float
    loss_pct: float
    jitter: Optional[float]
    imbalance: float
    class_loss: Dict[str, float]
    class_wait: Dict[str, Optional[float]]
    violations: List[str]
    windows: int


def aggregate_run(windows: Sequence[WindowMetrics], flowDelays: Dict[str, List[int]],
                  classBounds: Dict[str, tuple], classTotals: Dict[str, tuple], slotDurationMs: float) -> RunMetrics:
    """Average window metrics and check every class against its loss and delay bounds.

    `classTotals` maps a class to (received, lost, waitSum, waitCount) over the
    same windows; `classBounds` maps it to (l_qs, tau_qs).
    """
    received = sum(w.received for w in windows)
    lost = sum(w.lost for w in windows)
    jitters = [j for j in (compute_jitter(d) for _, d in sorted(flowDelays.items())) if j is not None]
    classLoss, classWait, violations = {}, {}, []
    for qs in sorted(classBounds):
        lossBound, waitBound = classBounds[qs]
        qsReceived, qsLost, waitSum, waitCount = classTotals.get(qs, (0, 0, 0, 0))
        classLoss[qs] = qsLost / qsReceived if qsReceived else 0.0
        classWait[qs] = waitSum / waitCount if waitCount else None
        if classLoss[qs] > lossBound:
            violations.append(f"{qs}:loss")
        if classWait[qs] is not None and classWait[qs] > waitBound:
            violations.append(f"{qs}:wait")
    return RunMetrics(
        utilization=float(np.mean([w.utilization for w in windows])) if windows else 0.0,
        loss_pct=100.0 * lost / received if received else 0.0,
        jitter=float(np.mean(jitters)) * slotDurationMs if jitters else None,
        imbalance=float(np.mean([w.imbalance for w in windows])) if windows else 0.0,
        class_loss=classLoss,
        class_wait=classWait,
        violations=violations,
        windows=len(windows),
    )


@dataclass
class ReportRow:
    row: str
    methods: List[str]
    seeds: List[int]
    runs: List[RunMetrics]

    def _mean(self, name: str) -> float:
        values = [getattr(run, name) for run in self.runs if getattr(run, name) is not None]
        return float(np.mean(values)) if values else float("nan")

    @property
    def utilization(self) -> float:
        return self._mean("utilization")

    @property
    def loss_pct(self) -> float:
        return self._mean("loss_pct")

    @property
    def jitter_ms(self) -> float:
        return self._mean("jitter")

    @property
    def imbalance(self) -> float:
        return self._mean("imbalance")

    @property
    def violations(self) -> List[str]:
        return sorted({v for run in self.runs for v in run.violations})

    @property
    def compliant(self) -> bool:
        return not self.violations

    def asRecord(self) -> dict:
        violations = self.violations
        record = {
            "row": self.row,
            "methods": "+".join(self.methods) if self.methods else "none",
            "seeds": " ".join(str(s) for s in self.seeds),
            "windows": self.runs[0].windows if self.runs else 0,
            "utilization": self.utilization,
            "loss_pct": self.loss_pct,
            "jitter_ms": self.jitter_ms,
            "imbalance": self.imbalance,
            "loss_compliant": not any(v.endswith(":loss") for v in violations),
            "wait_compliant": not any(v.endswith(":wait") for v in violations),
            "violations": "|".join(violations),
        }
        return {column: record[column] for column in REPORT_COLUMNS}


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)

    def row(self, name: str) -> ReportRow:
        for row in self.rows:
            if row.row == name:
                return row
        raise KeyError(name)

    def records(self) -> List[dict]:
        return [row.asRecord() for row in self.rows]

    @property
    def compliant(self) -> bool:
        return all(row.compliant for row in self.rows)
