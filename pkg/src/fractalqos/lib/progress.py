from tqdm import tqdm


class ProgressBarUpdater(tqdm):
    """Observer that mirrors an Observable job on a terminal progress bar."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("leave", False)
        kwargs.setdefault("dynamic_ncols", True)
        tqdm.__init__(self, *args, **kwargs)

    def set_progress(self, count, total):
        if not total or total == 0:
            return
        if self.total != total:
            self.total = total
            self.refresh()
        self.update(count - self.n)

    def __call__(self, total, increment, count, done, data, status):
        if status:
            self.set_description(status, refresh=False)
        self.set_progress(count, total)
        if done:
            self.close()


class JobProgress:
    """Observer that opens a fresh progress bar for every job it sees."""

    def __init__(self, **kwargs):
        self.kwargs = kwargs
        self.bar: ProgressBarUpdater = None

    def __call__(self, total, increment, count, done, data, status):
        if self.bar is None:
            self.bar = ProgressBarUpdater(total=total, **self.kwargs)
        self.bar(total, increment, count, done, data, status)
        if done:
            self.bar = None
