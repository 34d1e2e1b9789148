import json
import logging
import os
from typing import Iterable, List, Optional, Sequence

import jsonpickle
import numpy as np
import pandas as pd

from fractalqos.lib.errors import ConfigError, TraceError
from fractalqos.op.capacity import TABLE_VERSION, CalibrationGrid, CalibrationTable
from fractalqos.op.traffic import TrafficTrace
from fractalqos.sim.metrics import REPORT_COLUMNS

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
TRACE_COLUMNS = ("slot_index", "value")
TABLE_COLUMNS = ("rho", "H", "sigma_var", "buffer_norm", "saturated")
LOG_FILES = {
    "metricsLog": "metrics.csv",
    "routingLog": "routing.csv",
    "balancerLog": "balancer.csv",
    "controlLog": "control.csv",
}
EVENT_COLUMNS = ("seed", "slot", "sequence", "kind", "entity", "detail")


def _ensureParent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(parent):
        os.makedirs(parent)


def writeFrame(frame: pd.DataFrame, path: str):
    _ensureParent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def saveTrace(trace: TrafficTrace, path: str):
    frame = pd.DataFrame({"slot_index": np.arange(len(trace)), "value": trace.slots})
    writeFrame(frame, path)
    logger.info(f"Wrote {len(trace)} slots to {path}")


def loadTrace(path: str, slot_duration: float = 1.0, origin_class: str = None) -> TrafficTrace:
    if not os.path.exists(path):
        raise TraceError(f"trace file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise TraceError(f"{path}: missing column(s) {', '.join(missing)}")
    frame = frame.sort_values("slot_index")
    if not np.array_equal(frame["slot_index"].to_numpy(), np.arange(len(frame))):
        raise TraceError(f"{path}: slot_index must run 0..n-1 without gaps")
    values = frame["value"].to_numpy(dtype=np.float64)
    return TrafficTrace(values, slot_duration=slot_duration, origin_class=origin_class)


def tableMetaPath(path: str) -> str:
    return os.path.splitext(path)[0] + ".meta.json"


def saveCalibrationTable(table: CalibrationTable, path: str):
    grid = table.grid
    rows = []
    for i, rho in enumerate(grid.rho):
        for j, H in enumerate(grid.H):
            for k, sigma in enumerate(grid.sigma_var):
                value = table.values[i, j, k]
                saturated = not np.isfinite(value)
                rows.append((rho, H, sigma, np.nan if saturated else value, int(saturated)))
    writeFrame(pd.DataFrame(rows, columns=TABLE_COLUMNS), path)
    meta = dict(table.metadata)
    meta.update({
        "version": TABLE_VERSION,
        "loss_target": table.lossTarget,
        "grid": {"rho": list(grid.rho), "H": list(grid.H), "sigma_var": list(grid.sigma_var)},
    })
    with open(tableMetaPath(path), "w") as f:
        json.dump(meta, f, indent=4, sort_keys=True)
    logger.info(f"Wrote calibration table {path}")


def loadCalibrationTable(path: str) -> CalibrationTable:
    if not os.path.exists(path):
        raise ConfigError("calibration.table", f"file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in TABLE_COLUMNS if c not in frame.columns]
    if missing:
        raise ConfigError("calibration.table", f"{path}: missing column(s) {', '.join(missing)}")
    meta = {}
    if os.path.exists(tableMetaPath(path)):
        with open(tableMetaPath(path), "r") as f:
            meta = json.load(f)
    if meta.get("version", TABLE_VERSION) != TABLE_VERSION:
        raise ConfigError("calibration.table", f"{path}: unsupported table version {meta.get('version')}")

    grid = CalibrationGrid(
        rho=tuple(float(v) for v in sorted(frame["rho"].unique())),
        H=tuple(float(v) for v in sorted(frame["H"].unique())),
        sigma_var=tuple(float(v) for v in sorted(frame["sigma_var"].unique())),
    ).validate()
    values = np.full(grid.shape, np.nan)
    index = [{v: n for n, v in enumerate(axis)} for axis in (grid.rho, grid.H, grid.sigma_var)]
    for row in frame.itertuples(index=False):
        cell = (index[0][float(row.rho)], index[1][float(row.H)], index[2][float(row.sigma_var)])
        values[cell] = np.inf if int(row.saturated) else float(row.buffer_norm)
    if np.isnan(values).any():
        raise ConfigError("calibration.table", f"{path}: grid is incomplete")
    lossTarget = float(meta.get("loss_target", 0.01))
    return CalibrationTable(grid, values, lossTarget, meta)


def saveRecords(records: Sequence[dict], path: str, columns: Sequence[str] = None):
    frame = pd.DataFrame(list(records), columns=list(columns) if columns else None)
    writeFrame(frame, path)


def saveRunLogs(runs: Iterable, outDir: str, events: bool = False) -> List[str]:
    """metrics/routing/balancer/control logs of every run, plus events.csv when asked."""
    runs = list(runs)
    written = []
    for attribute, name in LOG_FILES.items():
        rows = [row for run in runs for row in getattr(run, attribute)]
        path = os.path.join(outDir, name)
        saveRecords(rows, path)
        written.append(path)
    if events:
        rows = [(run.seed, *event) for run in runs for event in run.events]
        path = os.path.join(outDir, "events.csv")
        writeFrame(pd.DataFrame(rows, columns=EVENT_COLUMNS), path)
        written.append(path)
    return written


def saveReport(report, outDir: str, runs: Iterable = (), events: bool = False,
               extra: Optional[dict] = None) -> List[str]:
    """report.csv, summary.json and the per-run logs under outDir."""
    runs = list(runs)
    if not os.path.exists(outDir):
        os.makedirs(outDir)
    reportPath = os.path.join(outDir, "report.csv")
    saveRecords(report.records(), reportPath, REPORT_COLUMNS)
    summary = {
        "rows": report.records(),
        "compliant": report.compliant,
        "runs": [
            {
                "row": "+".join(run.methods) or "none",
                "seed": run.seed,
                "metrics": run.metrics,
            }
            for run in runs
        ],
    }
    if extra:
        summary.update(extra)
    summaryPath = os.path.join(outDir, "summary.json")
    with open(summaryPath, "w") as f:
        f.write(jsonpickle.encode(summary, unpicklable=False, indent=2))
        f.write("\n")
    written = [reportPath, summaryPath] + saveRunLogs(runs, outDir, events)
    logger.info(f"Wrote report to {outDir}")
    return written


def loadReport(path: str) -> pd.DataFrame:
    return pd.read_csv(path)
