"""Three-role orchestration: tracking, local mapping and loop closing.

``System(threaded=False)`` runs the roles round-robin after every frame and
advances full BA a bounded number of LM iterations per frame, so the whole
run is reproducible.  ``threaded=True`` runs local mapping, loop closing and
full BA on their own threads with a bounded keyframe handoff queue.
"""
from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass

import numpy as np

from ..frame import Frame
from ..geometry import Intrinsics, Pose
from ..place_recognition import KeyFrameDatabase, Vocabulary, bow_vector
from ..trajectory import Trajectory
from ..worldmap import WorldMap
from .config import SystemConfig
from .fullba import FullBAController
from .loop import LoopCloser
from .mapping import LocalMapper
from .timing import Timings
from .tracking import BootstrapFailed, LastFrame, Mode, Status, Tracker, TrackResult, bootstrap

log = logging.getLogger(__name__)

_STOP = object()


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    status: str
    ref_kf: int | None
    rel: Pose | None          # Twc_ref^-1 @ Twc_frame
    pose: Pose                # pose at tracking time (fallback)
    inliers: int = 0
    keyframe: bool = False


def database_from_map(wm: WorldMap, vocab: Vocabulary | None) -> KeyFrameDatabase:
    db = KeyFrameDatabase()
    for k in sorted(wm.keyframes):
        kf = wm.keyframes[k]
        if not kf.bow and vocab is not None:
            kf.bow = bow_vector(kf.descriptors, vocab)
        db.add(k, kf.bow)
    return db


class System:
    def __init__(self, K: Intrinsics, vocab: Vocabulary | None, cfg: SystemConfig | None = None,
                 mode: Mode | str = Mode.MAPPING, wm: WorldMap | None = None,
                 threaded: bool = False):
        self.cfg = cfg or SystemConfig()
        self.mode = Mode(mode)
        self.vocab = vocab
        self.threaded = threaded
        self.timings = Timings()
        if self.mode == Mode.LOCALIZATION and wm is None:
            wm = WorldMap(K)
        self.wm = wm if wm is not None else WorldMap(K)
        self.db = database_from_map(self.wm, vocab) if wm is not None else KeyFrameDatabase()
        self.tracker = Tracker(self.wm, self.cfg, vocab, self.db, mode=self.mode)
        self.mapper = LocalMapper(self.wm, self.cfg, vocab, self.db, self.timings)
        self.ba = FullBAController(self.wm, self.cfg.full_ba, threaded=threaded, timings=self.timings)
        self.closer = LoopCloser(self.wm, self.cfg, self.db, self.ba, self.timings)
        self.records: list[FrameRecord] = []
        self._records_lock = threading.Lock()
        self._kf_queue: queue.Queue = queue.Queue(maxsize=self.cfg.keyframe_queue)
        self._loop_queue: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        if threaded and self.mode == Mode.MAPPING:
            for name, fn in (("local-mapping", self._mapping_loop), ("loop-closing", self._loop_loop)):
                t = threading.Thread(target=fn, name=name, daemon=True)
                t.start()
                self._threads.append(t)

    # ------------------------------------------------------------- workers
    def _map_keyframe(self, frame, pose, map_points):
        summary = self.mapper.step(frame, pose, map_points)
        kf_id = summary["kf_id"]
        self._rebase_record(frame.index, kf_id)
        if self.mode == Mode.MAPPING and self.cfg.loop_closing:
            return kf_id
        return None

    def _rebase_record(self, frame_index, kf_id):
        with self._records_lock:
            for r in reversed(self.records):
                if r.index == frame_index:
                    r.ref_kf, r.rel, r.keyframe = kf_id, Pose.identity(), True
                    break
        self.tracker.keyframe_inserted(frame_index, kf_id)

    def _mapping_loop(self):
        while True:
            item = self._kf_queue.get()
            try:
                if item is _STOP:
                    self._loop_queue.put(_STOP)
                    return
                kf_id = self._map_keyframe(*item)
                if kf_id is not None:
                    self._loop_queue.put(kf_id)
            except BaseException as exc:  # surfaced by finish()
                self._errors.append(exc)
                log.exception("local mapping failed")
            finally:
                self._kf_queue.task_done()

    def _loop_loop(self):
        while True:
            kf_id = self._loop_queue.get()
            if kf_id is _STOP:
                return
            try:
                self.closer.process(kf_id)
            except BaseException as exc:
                self._errors.append(exc)
                log.exception("loop closing failed")

    # ------------------------------------------------------------- frames
    def process(self, frame: Frame) -> TrackResult:
        wm = self.wm
        if self.mode == Mode.MAPPING and not wm.keyframes:
            return self._bootstrap(frame)
        with self.timings.measure("Tracking"), wm.lock.read():
            res = self.tracker.track(frame)
        st = self.tracker.state
        ref = st.ref_kf
        with wm.lock.read():
            rel = None
            if ref is not None:
                k, extra = wm.resolve_pose(ref)
                rel = (wm.keyframes[k].pose @ extra).inverse() @ res.pose
        rec = FrameRecord(frame.index, frame.timestamp, res.status.value, ref, rel, res.pose,
                          res.inliers)
        with self._records_lock:
            self.records.append(rec)
        if self.mode == Mode.MAPPING and res.status == Status.OK and res.need_keyframe:
            # the close-point rule overrides backpressure: the put blocks rather than drops
            self.tracker.state.last_kf_frame = frame.index
            item = (frame, res.pose, res.map_points.copy())
            if self.threaded:
                self._kf_queue.put(item)
            else:
                kf_id = self._map_keyframe(*item)
                if kf_id is not None:
                    self.closer.process(kf_id)
        if not self.threaded:
            self.ba.step(self.cfg.ba_steps_per_frame)
        return res

    def _bootstrap(self, frame: Frame) -> TrackResult:
        wm = self.wm
        n = len(frame)
        try:
            with wm.mutation_lock, wm.lock.write():
                kf = bootstrap(frame, wm)
                if self.vocab is not None:
                    kf.bow = bow_vector(kf.descriptors, self.vocab)
        except BootstrapFailed:
            rec = FrameRecord(frame.index, frame.timestamp, Status.NOT_INITIALIZED.value, None, None,
                              Pose.identity())
            with self._records_lock:
                self.records.append(rec)
            return TrackResult(Status.NOT_INITIALIZED, Pose.identity(), np.full(n, -1, np.int64))
        self.db.add(kf.id, kf.bow)
        st = self.tracker.state
        st.status = Status.OK
        st.ref_kf = kf.id
        st.last_kf_frame = frame.index
        st.last = LastFrame(frame, kf.pose, kf.map_points.copy(), kf.id, Pose.identity())
        with self._records_lock:
            self.records.append(FrameRecord(frame.index, frame.timestamp, Status.OK.value, kf.id,
                                            Pose.identity(), kf.pose, int(np.sum(kf.map_points >= 0)),
                                            keyframe=True))
        return TrackResult(Status.OK, kf.pose, kf.map_points.copy(), ref_kf=kf.id)

    def run(self, frames) -> None:
        for f in frames:
            self.process(f)
        self.finish()

    def finish(self) -> None:
        """Drain queued work and complete any running full BA."""
        if self.threaded and self._threads:
            self._kf_queue.put(_STOP)
            for t in self._threads:
                t.join()
            self._threads = []
        self.ba.wait()
        if self._errors:
            raise self._errors[0]

    # ------------------------------------------------------------- outputs
    def frame_poses(self) -> list[Pose]:
        wm = self.wm
        out = []
        with wm.lock.read():
            for r in self.records:
                if r.ref_kf is not None and r.rel is not None:
                    try:
                        k, extra = wm.resolve_pose(r.ref_kf)
                    except KeyError:
                        out.append(r.pose)
                        continue
                    out.append(wm.keyframes[k].pose @ extra @ r.rel)
                else:
                    out.append(r.pose)
        return out

    def frame_trajectory(self) -> Trajectory:
        return Trajectory.from_poses([r.timestamp for r in self.records], self.frame_poses())

    def keyframe_trajectory(self) -> Trajectory:
        kfs = sorted(self.wm.keyframes.values(), key=lambda k: k.timestamp)
        return Trajectory.from_poses([k.timestamp for k in kfs], [k.pose for k in kfs])

    def write_run_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "timestamp", "status", "inliers", "keyframe", "ref_kf"])
            for r in self.records:
                w.writerow([r.index, "%.6f" % r.timestamp, r.status, r.inliers, int(r.keyframe),
                            "" if r.ref_kf is None else r.ref_kf])

    def write_ba_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "iteration", "cost", "damping", "accepted"])
            for src, rows in (("local", self.mapper.ba_log), ("full", self.ba.log)):
                for row in rows:
                    w.writerow([src, row["iteration"], "%.17g" % row["cost"],
                                "%.6g" % row["damping"], int(row["accepted"])])
