import logging
import os
from typing import List, Optional, Sequence, Union

from fractalqos.lib.util import Observable

logger = logging.getLogger(__name__)

# Use deferred loading for the numerical modules to keep CLI startup fast.
from deferred_import import deferred_import

traffic = deferred_import("fractalqos.op.traffic")
estimators = deferred_import("fractalqos.op.estimators")
capacity = deferred_import("fractalqos.op.capacity")
files = deferred_import("fractalqos.lib.file")
config = deferred_import("fractalqos.sim.config")
scenario = deferred_import("fractalqos.sim.scenario")


class App:

    def __init__(self, workers: int = None):
        self.workers = workers
        self.activeOperation: Observable = None
        self.observers = []

    def addObserver(self, observer):
        self.observers.append(observer)

    def _track(self, operation: Observable) -> Observable:
        for observer in self.observers:
            operation.addObserver(observer)
        self.activeOperation = operation
        return operation

    def interrupt(self):
        if self.activeOperation is not None:
            self.activeOperation.requestInterrupt()

    def generateTrace(self, spec, path: str = None):
        trace = traffic.compose_traffic(spec)
        if path:
            files.saveTrace(trace, path)
        logger.info(f"Generated {len(trace)} slots, mean {trace.mean():.4f}")
        return trace

    def analyzeTrace(self, source, q_grid: Sequence[float] = None, method=None, window: int = None,
                     slot_duration: float = 1.0):
        """Signature of a trace (or file); one per window when `window` is given."""
        trace = files.loadTrace(source, slot_duration) if isinstance(source, str) else source
        kwargs = {}
        if q_grid:
            kwargs["q_grid"] = q_grid
        if method is not None:
            kwargs["method"] = method
        if window:
            return estimators.window_signatures(trace, window, **kwargs)
        return estimators.signature(trace, **kwargs)

    def calibrateTable(self, grid=None, loss_target: float = None, seeds: int = None, length: int = None,
                       cascade_depth: int = None, path: str = None, master_seed: int = 0):
        calibrator = capacity.Calibrator(
            grid if grid is not None else capacity.CalibrationGrid(),
            loss_target if loss_target is not None else capacity.DEFAULT_LOSS_TARGET,
            seeds if seeds is not None else capacity.DEFAULT_SEEDS,
            length if length is not None else capacity.DEFAULT_LENGTH,
            cascade_depth if cascade_depth is not None else capacity.DEFAULT_CASCADE_DEPTH,
            masterSeed=master_seed,
            workers=self.workers,
        )
        table = self._track(calibrator).run()
        if path:
            files.saveCalibrationTable(table, path)
        return table

    def loadScenario(self, path: str, seeds: Optional[List[int]] = None):
        loaded = config.load_scenario(path)
        if seeds:
            loaded = loaded.withSeeds(seeds)
        return loaded

    def _table(self, loaded):
        if not scenario.needs_table(loaded) and not os.path.exists(loaded.tablePath()):
            return None
        observer = self.observers[0] if self.observers else None
        return scenario.ensure_table(loaded, observer, self.workers)

    def simulate(self, source: Union[str, object], out_dir: str = None, events: bool = False,
                 verify_ledger: bool = False, seeds: Optional[List[int]] = None):
        loaded = self.loadScenario(source, seeds) if isinstance(source, str) else source
        table = self._table(loaded)
        name = "+".join(scenario.method_names(loaded.methods)) or "none"
        comparison = scenario.Comparison(loaded, [(name, loaded.methods)], table, verify_ledger, events,
                                         self.workers)
        report = self._track(comparison).run()
        if out_dir:
            files.saveReport(report, out_dir, comparison.results[name], events, {"scenario": loaded.name})
        return report

    def compare(self, source: Union[str, object], out_dir: str = None, events: bool = False,
                verify_ledger: bool = False, seeds: Optional[List[int]] = None):
        loaded = self.loadScenario(source, seeds) if isinstance(source, str) else source
        table = scenario.ensure_table(loaded, self.observers[0] if self.observers else None, self.workers)
        comparison = scenario.Comparison(loaded, scenario.COMPARISON_ROWS, table, verify_ledger, events,
                                         self.workers)
        report = self._track(comparison).run()
        if out_dir:
            runs = [run for name, _ in scenario.COMPARISON_ROWS for run in comparison.results[name]]
            files.saveReport(report, out_dir, runs, events, {"scenario": loaded.name})
        return report
