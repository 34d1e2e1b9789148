import logging
import os

import psutil

logger = logging.getLogger(__name__)


class HostInfo:

    def __init__(self):
        try:
            self.physicalCores = psutil.cpu_count(logical=False)
        except Exception as e:
            logger.warning(f"Could not query physical core count: {e}")
            self.physicalCores = None
        self.logicalCores = psutil.cpu_count(logical=True) or os.cpu_count() or 1

    def getWorkerCount(self, requested: int = None, jobs: int = None) -> int:
        """Number of worker processes for independent simulations."""
        if requested is not None and requested > 0:
            workers = requested
        else:
            workers = self.physicalCores or self.logicalCores
        if jobs is not None:
            workers = min(workers, jobs)
        return max(1, workers)
