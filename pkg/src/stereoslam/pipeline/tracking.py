"""Per-frame camera tracking against the map (read-only on the map)."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..frame import Frame
from ..geometry import Pose, backproject_batch
from ..matching import search_by_projection
from ..optim import InsufficientMatches, OptimizationDiverged, motion_only_ba
from ..place_recognition import bow_vector, relocalize
from ..worldmap import KeyFrame, MapPoint, Provenance, WorldMap, classify_point, need_new_keyframe
from .config import SystemConfig


class Mode(str, Enum):
    MAPPING = "mapping"
    LOCALIZATION = "localization"


class Status(str, Enum):
    NOT_INITIALIZED = "not_initialized"
    OK = "ok"
    LOST = "lost"


class BootstrapFailed(ValueError):
    pass


@dataclass
class LastFrame:
    frame: Frame
    pose: Pose               # camera-to-world at the time it was tracked
    map_points: np.ndarray   # point id per keypoint, -1 if none
    ref_kf: int | None
    rel: Pose | None         # pose relative to ref_kf (Twc_ref^-1 @ Twc)


@dataclass
class TrackingState:
    mode: Mode = Mode.MAPPING
    status: Status = Status.NOT_INITIALIZED
    velocity: Pose | None = None    # Tcw_current @ Tcw_previous^-1
    last: LastFrame | None = None
    ref_kf: int | None = None
    last_kf_frame: int = 0


@dataclass
class TrackResult:
    status: Status
    pose: Pose
    map_points: np.ndarray
    inliers: int = 0
    tracked_close: int = 0
    creatable_close: int = 0
    need_keyframe: bool = False
    relocalized: bool = False
    ref_kf: int | None = None
    stats: dict = field(default_factory=dict)


def bootstrap(frame: Frame, wm: WorldMap) -> KeyFrame:
    """First keyframe at the origin with one point per stereo keypoint."""
    stereo = np.flatnonzero(frame.is_stereo)
    if len(stereo) == 0:
        raise BootstrapFailed("frame has no stereo keypoints")
    if wm.keyframes:
        raise ValueError("map is not empty")
    kf = KeyFrame.from_frame(wm.next_kf_id, frame, Pose.identity())
    wm.add_keyframe(kf)
    wm.kf_insertions += 1
    Xc = backproject_batch(frame.uv[stereo], frame.ur[stereo], wm.K)
    for i, X in zip(stereo, Xc):
        mp = wm.create_point(X, frame.descriptors[i], classify_point(X[2], wm.K), kf.id)
        wm.add_observation(mp.id, kf.id, int(i))
    return kf


def _meas(frame: Frame, idx) -> np.ndarray:
    return np.column_stack([frame.uv[idx], frame.ur[idx]])


def close_stats(frame: Frame, tracked: np.ndarray, K) -> tuple[int, int]:
    """(tracked close stereo keypoints, untracked close stereo keypoints)."""
    close = frame.is_stereo & (frame.depth(K) < K.close_depth)
    return int(np.sum(close & tracked)), int(np.sum(close & ~tracked))


class Tracker:
    def __init__(self, wm: WorldMap, cfg: SystemConfig, vocab=None, database=None,
                 mode: Mode = Mode.MAPPING):
        self.wm = wm
        self.cfg = cfg
        self.vocab = vocab
        self.db = database
        self.state = TrackingState(mode=mode)

    # ------------------------------------------------------------ helpers
    def _points(self, pids):
        pts = self.wm.points
        pos = np.array([pts[p].position for p in pids]).reshape(-1, 3)
        desc = np.array([pts[p].descriptor for p in pids]).reshape(-1, 32)
        return pos, desc

    def _search(self, frame, Tcw, pids, pos, desc, assoc, radius):
        if len(pids) == 0:
            return 0
        pi, ki = search_by_projection(frame.uv, frame.ur, frame.octave, frame.descriptors, Tcw,
                                      pos, desc, self.wm.K, radius=radius,
                                      max_dist=self.cfg.hamming_max, ratio=self.cfg.ratio,
                                      exclude_keypoints=assoc != -1)
        assoc[ki] = np.asarray(pids)[pi]
        return len(pi)

    def _optimize(self, frame, Twc, assoc, extra_pos=None):
        """Motion-only BA over associated keypoints; returns (pose, inlier mask over keypoints)."""
        sel = np.flatnonzero(assoc != -1)
        if len(sel) < 6:
            raise InsufficientMatches("too few matches")
        pos = np.empty((len(sel), 3))
        mapped = assoc[sel] >= 0
        if mapped.any():
            pos[mapped] = self._points(assoc[sel][mapped])[0]
        if extra_pos is not None and (~mapped).any():
            pos[~mapped] = extra_pos[-assoc[sel][~mapped] - 2]
        pose, inl = motion_only_ba(_meas(frame, sel), frame.octave[sel], pos, Twc, self.wm.K)
        mask = np.zeros(len(frame), dtype=bool)
        mask[sel[inl]] = True
        return pose, mask

    def local_map(self, assoc, ref_hint=None):
        """Local keyframes (by shared tracked points plus neighbors) and their points."""
        wm = self.wm
        counts: dict[int, int] = {}
        for p in assoc[assoc >= 0]:
            for k in wm.points[int(p)].observations:
                counts[k] = counts.get(k, 0) + 1
        if not counts and ref_hint is not None and ref_hint in wm.keyframes:
            counts[ref_hint] = 1
        order = sorted(counts, key=lambda k: (-counts[k], k))
        kfs = list(order[:self.cfg.local_map_max_kfs])
        seen = set(kfs)
        for k in list(kfs):
            for n in wm.covisible(k)[:self.cfg.local_map_neighbors]:
                if n not in seen and len(kfs) < 2 * self.cfg.local_map_max_kfs:
                    kfs.append(n)
                    seen.add(n)
        ref = order[0] if order else ref_hint
        pids = set()
        for k in kfs:
            pids.update(wm.keyframes[k].point_ids())
        return ref, kfs, np.array(sorted(pids), dtype=np.int64)

    def _predict(self, frame):
        st = self.state
        last = st.last
        wm = self.wm
        if last.ref_kf is not None and last.rel is not None:
            k, extra = wm.resolve_pose(last.ref_kf)
            Twc_last = wm.keyframes[k].pose @ extra @ last.rel
        else:
            Twc_last = last.pose
        Twc_last = Twc_last.normalized()
        if st.velocity is None:
            return Twc_last, Twc_last
        return Twc_last, (st.velocity @ Twc_last.inverse()).inverse().normalized()

    # ------------------------------------------------------------- tracking
    def track(self, frame: Frame) -> TrackResult:
        st = self.state
        wm = self.wm
        n = len(frame)
        empty = np.full(n, -1, dtype=np.int64)
        if st.last is None or st.status == Status.LOST:
            res = self._relocalize(frame)
            if res is None:
                pose = st.last.pose if st.last is not None else Pose.identity()
                return self._finish(frame, TrackResult(Status.LOST, pose, empty))
            return self._finish(frame, res)
        Twc_last, Twc_pred = self._predict(frame)
        res = self._track_with_prediction(frame, Twc_pred, Twc_last)
        if res.status == Status.LOST:
            reloc = self._relocalize(frame)
            if reloc is not None:
                res = reloc
        return self._finish(frame, res)

    def _track_with_prediction(self, frame, Twc_pred, Twc_last) -> TrackResult:
        st = self.state
        wm = self.wm
        cfg = self.cfg
        n = len(frame)
        assoc = np.full(n, -1, dtype=np.int64)
        last = st.last
        prev = np.array([wm.live_point(int(p)) if p >= 0 else -1 for p in last.map_points],
                        dtype=np.int64)
        prev = np.unique(prev[prev >= 0])
        extra = None
        vo_ids = np.zeros(0, dtype=np.int64)
        if st.mode == Mode.LOCALIZATION:
            extra, vo_desc = self._vo_points(Twc_last)
            vo_ids = -np.arange(len(extra), dtype=np.int64) - 2
        Tcw = Twc_pred.inverse()
        for radius in (cfg.search_radius, 2 * cfg.search_radius):
            assoc[:] = -1
            if len(prev):
                pos, desc = self._points(prev)
                self._search(frame, Tcw, prev, pos, desc, assoc, radius)
            if len(vo_ids):
                self._search(frame, Tcw, vo_ids, extra, vo_desc, assoc, radius)
            if np.sum(assoc != -1) >= 20:
                break
        try:
            pose, inl = self._optimize(frame, Twc_pred, assoc, extra)
        except (InsufficientMatches, OptimizationDiverged):
            pose, inl = Twc_pred, np.zeros(n, dtype=bool)
        assoc[~inl] = -1
        if np.sum(assoc >= 0) == 0 and len(prev) == 0 and st.ref_kf is None:
            return TrackResult(Status.LOST, Twc_pred, np.full(n, -1, dtype=np.int64))
        # local map
        ref, kfs, local = self.local_map(assoc, st.ref_kf)
        if len(local):
            mapped = set(assoc[assoc >= 0].tolist())
            todo = np.array([p for p in local if p not in mapped], dtype=np.int64)
            if len(todo):
                pos, desc = self._points(todo)
                self._search(frame, pose.inverse() if inl.any() else Tcw, todo, pos, desc, assoc,
                             cfg.search_radius)
        try:
            pose, inl = self._optimize(frame, pose if inl.any() else Twc_pred, assoc, extra)
        except (InsufficientMatches, OptimizationDiverged):
            return TrackResult(Status.LOST, Twc_pred, np.full(n, -1, dtype=np.int64))
        assoc[~inl] = -1
        n_inl = int(inl.sum())
        mp_assoc = np.where(assoc >= 0, assoc, -1)
        if n_inl < cfg.lost_inliers:
            return TrackResult(Status.LOST, pose, mp_assoc, inliers=n_inl)
        tracked = mp_assoc >= 0
        tc, cc = close_stats(frame, tracked, wm.K)
        ref2, _, _ = self.local_map(mp_assoc, ref)
        return TrackResult(Status.OK, pose, mp_assoc, inliers=n_inl, tracked_close=tc,
                           creatable_close=cc, ref_kf=ref2 if ref2 is not None else ref,
                           stats={"map_matches": int(tracked.sum())})

    def _vo_points(self, Twc_last):
        """Temporary points from the previous frame's unmapped stereo keypoints."""
        last = self.state.last
        f = last.frame
        sel = np.flatnonzero(f.is_stereo & (last.map_points < 0))
        if len(sel) == 0:
            return np.zeros((0, 3)), np.zeros((0, 32), np.uint8)
        Xc = backproject_batch(f.uv[sel], f.ur[sel], self.wm.K)
        return Twc_last.apply(Xc), f.descriptors[sel]

    def _relocalize(self, frame) -> TrackResult | None:
        if self.vocab is None or self.db is None or not self.wm.keyframes:
            return None
        r = relocalize(frame, self.wm, self.vocab, self.db, min_inliers=self.cfg.reloc_min_inliers)
        if r is None:
            return None
        self.state.velocity = None
        tc, cc = close_stats(frame, r.map_points >= 0, self.wm.K)
        return TrackResult(Status.OK, r.pose, r.map_points, inliers=r.inliers, tracked_close=tc,
                           creatable_close=cc, relocalized=True, ref_kf=r.kf_id)

    def _finish(self, frame: Frame, res: TrackResult) -> TrackResult:
        st = self.state
        wm = self.wm
        if res.status == Status.OK:
            if st.last is not None and st.status == Status.OK and not res.relocalized:
                prev_pose = self._predict(frame)[0]
                st.velocity = res.pose.inverse() @ prev_pose
            if res.ref_kf is not None:
                st.ref_kf = res.ref_kf
            rel = None
            if st.ref_kf is not None:
                k, extra = wm.resolve_pose(st.ref_kf)
                rel = (wm.keyframes[k].pose @ extra).inverse() @ res.pose
            st.last = LastFrame(frame, res.pose, res.map_points.copy(), st.ref_kf, rel)
            if st.mode == Mode.MAPPING:
                frames_since = frame.index - st.last_kf_frame
                res.need_keyframe = need_new_keyframe(
                    res.tracked_close, res.creatable_close, frames_since, self.cfg.policy,
                    tracked_matches=res.inliers)
        else:
            st.velocity = None
        st.status = res.status
        return res

    def keyframe_inserted(self, frame_index: int, kf_id: int) -> None:
        st = self.state
        st.last_kf_frame = frame_index
        st.ref_kf = kf_id
        if st.last is not None and st.last.frame.index == frame_index:
            st.last.ref_kf = kf_id
            st.last.rel = Pose.identity()
            if kf_id in self.wm.keyframes:
                st.last.map_points = self.wm.keyframes[kf_id].map_points.copy()
