import hashlib

from fractalqos.lib.errors import JobInterrupted


class Job:
    def __init__(self, total: int, label: str = None):
        self.total = total
        self.label = label
        self.count = 0
        self.done = False
        self.interrupt = False


class Observable():
    """Long-running operation that reports progress to observer callables.

    Observers are called as observer(total, increment, count, done, data, status).
    """

    def __init__(self):
        self.job: Job = None
        self.observers = []
        self.status_message = None

    def startJob(self, total, label=None):
        self.job = Job(total, label)
        self.status_message = label
        self.notifyObservers()

    def updateJob(self, increment, data=None):
        if self.job is not None:
            self.job.count += increment
            if self.job.count >= self.job.total:
                self.job.done = True

        self.notifyObservers(increment, data)

    def finishJob(self):
        if self.job is not None and not self.job.done:
            self.job.done = True
            self.notifyObservers()

    def notifyObservers(self, increment=0, data=None):
        for observer in self.observers:
            observer(
                self.job.total if self.job else 0,
                increment,
                self.job.count if self.job else 0,
                self.job.done if self.job else False,
                data,
                self.status_message)

    def requestInterrupt(self):
        if self.job is not None:
            self.job.interrupt = True

    def shouldInterrupt(self):
        return self.job is not None and self.job.interrupt

    def checkInterrupt(self):
        if self.shouldInterrupt():
            raise JobInterrupted(self.job.label or type(self).__name__)

    def addObserver(self, observer):
        self.observers.append(observer)


def stableHash(name: str) -> int:
    """64-bit digest of a name, independent of PYTHONHASHSEED."""
    return int(hashlib.md5(name.encode()).hexdigest()[:16], 16)


def isPowerOfTwo(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0
