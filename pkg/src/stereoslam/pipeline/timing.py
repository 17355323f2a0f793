"""Per-task wall-clock accounting."""
from __future__ import annotations

import csv
import threading
import time
from contextlib import contextmanager


class Timings:
    def __init__(self):
        self._lock = threading.Lock()
        self.samples: dict[str, list[float]] = {}

    @contextmanager
    def measure(self, task: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            with self._lock:
                self.samples.setdefault(task, []).append(dt)

    def summary(self) -> list[dict]:
        with self._lock:
            rows = []
            for task, s in self.samples.items():
                rows.append({"task": task, "count": len(s), "mean_ms": 1e3 * sum(s) / len(s),
                             "max_ms": 1e3 * max(s), "total_s": sum(s)})
        return rows

    def write_csv(self, path) -> None:
        rows = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["task", "count", "mean_ms", "max_ms", "total_s"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
