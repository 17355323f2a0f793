"""Full bundle adjustment on a snapshot, with abort and spanning-tree merge."""
from __future__ import annotations

import threading

from ..optim import Aborted, BAResult, LMConfig, full_ba, full_ba_steps, snapshot_problem
from ..worldmap import WorldMap
from .timing import Timings


def merge_full_ba(wm: WorldMap, result: BAResult) -> dict:
    """Write an optimized snapshot back into the live map.

    Snapshot keyframes take their optimized poses.  Keyframes created after
    the snapshot inherit the correction of their nearest optimized ancestor
    in the spanning tree, and points that were not optimized move rigidly
    with their reference keyframe.  Call with the map's write lock held.
    """
    current = {k: kf.pose for k, kf in wm.keyframes.items()}
    new = {}
    for k in result.before_poses:
        if k in current:
            new[k] = result.poses.get(k, result.before_poses[k])
    propagated = 0
    if wm.origin_id is not None:
        stack = [wm.origin_id]
        if wm.origin_id not in new:
            new[wm.origin_id] = current[wm.origin_id]
        while stack:
            k = stack.pop()
            for c in sorted(wm.keyframes[k].children):
                if c not in new:
                    new[c] = new[k] @ current[k].inverse() @ current[c]
                    propagated += 1
                stack.append(c)
    for k in current:
        new.setdefault(k, current[k])
    moved = 0
    for pid, mp in wm.points.items():
        if pid in result.points:
            mp.position = result.points[pid].copy()
        else:
            ref = mp.reference_kf
            if ref in new:
                mp.position = (new[ref] @ current[ref].inverse()).apply(mp.position)
                moved += 1
    for k, T in new.items():
        wm.keyframes[k].pose = T
    return {"optimized": len(result.poses), "propagated": propagated, "rigid_points": moved}


class FullBAController:
    """Runs at most one full BA at a time.

    In threaded mode the optimization runs on a worker thread; in step mode
    it is a generator advanced explicitly by ``step``.  Either way it works
    on a snapshot and merges atomically under the map's write lock.
    """

    def __init__(self, wm: WorldMap, config: LMConfig | None = None, threaded: bool = False,
                 timings: Timings | None = None):
        self.wm = wm
        self.config = config or LMConfig(max_iterations=10)
        self.threaded = threaded
        self.timings = timings or Timings()
        self.launches = 0
        self.aborts = 0
        self.merges = 0
        self.log: list = []
        self.events: list = []
        self._abort = threading.Event()
        self._gen = None
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._loop_kf = None

    @property
    def running(self) -> bool:
        if self.threaded:
            return self._thread is not None and self._thread.is_alive()
        return self._gen is not None

    def launch(self, loop_kf: int | None = None) -> None:
        if self.running:
            self.abort()
        with self.wm.lock.read():
            prob = snapshot_problem(self.wm)
        self._abort = threading.Event()
        self._loop_kf = loop_kf
        self.launches += 1
        self.events.append(("launch", loop_kf))
        if self.threaded:
            abort = self._abort
            self._thread = threading.Thread(target=self._worker, args=(prob, abort),
                                            name="full-ba", daemon=True)
            self._thread.start()
        else:
            self._gen = full_ba_steps(prob, self.config, abort=self._abort, log=self.log)

    def _worker(self, prob, abort):
        try:
            with self.timings.measure("Full BA"):
                res = full_ba(prob, self.config, abort=abort, log=self.log)
        except Aborted:
            self._record_abort()
            return
        with self.wm.mutation_lock:
            if abort.is_set():
                self._record_abort()
                return
            self._merge(res)

    def _record_abort(self):
        with self._lock:
            self.aborts += 1
            self.events.append(("aborted", self._loop_kf))

    def _merge(self, res: BAResult):
        with self.timings.measure("Map Update"), self.wm.lock.write():
            summary = merge_full_ba(self.wm, res)
        with self._lock:
            self.merges += 1
            self.events.append(("merged", self._loop_kf))
        return summary

    def step(self, iterations: int = 1) -> bool:
        """Advance a step-mode BA; returns True when it finished (merged or aborted)."""
        if self.threaded or self._gen is None:
            return False
        for _ in range(iterations):
            try:
                with self.timings.measure("Full BA"):
                    next(self._gen)
            except StopIteration as stop:
                self._gen = None
                with self.wm.mutation_lock:
                    self._merge(stop.value)
                return True
            except Aborted:
                self._gen = None
                self._record_abort()
                return True
        return False

    def abort(self) -> None:
        """Raise the abort flag and wait until the running BA has stopped."""
        if not self.running:
            return
        self._abort.set()
        if self.threaded:
            self._thread.join()
        else:
            self.step(1)

    def wait(self) -> None:
        if self.threaded:
            if self._thread is not None:
                self._thread.join()
        else:
            while self._gen is not None:
                self.step(1)
