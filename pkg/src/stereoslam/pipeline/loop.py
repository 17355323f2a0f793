"""Loop detection, geometric validation and loop correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose
from ..matching import match_descriptors, search_by_projection
from ..optim import (InsufficientMatches, LMConfig, OptimizationDiverged, PoseGraphEdge,
                     motion_only_ba, pose_graph_optimize)
from ..place_recognition import (LoopDetector, RansacConfig, detect_loop_candidates, estimate_se3,
                                 stereo_pair_thresholds)
from ..worldmap import WorldMap
from .config import SystemConfig
from .mapping import _point_arrays, chi2_ok, fuse_points_into
from .timing import Timings


@dataclass
class LoopEvent:
    current: int
    matched: int
    relative: Pose            # matched^-1 @ corrected current (camera-to-world)
    inliers: int
    corrected_pose: Pose = None
    matches: list = field(default_factory=list)  # (keypoint index in current, point id)

    def __post_init__(self):
        if self.inliers < 0:
            raise ValueError("inlier count must be non-negative")


def _group_points(wm: WorldMap, kf_id: int) -> tuple[list[int], np.ndarray]:
    group = [kf_id, *wm.covisible(kf_id)]
    pids = set()
    for k in group:
        pids.update(wm.keyframes[k].point_ids())
    return group, np.array(sorted(pids), dtype=np.int64)


def validate_loop(wm: WorldMap, current: int, candidate: int, cfg: SystemConfig) -> LoopEvent | None:
    """RANSAC rigid alignment of matched points, then guided matching and pose refinement."""
    K = wm.K
    kf = wm.keyframes[current]
    cand = wm.keyframes[candidate]
    a_idx = np.flatnonzero(kf.map_points >= 0)
    b_idx = np.flatnonzero(cand.map_points >= 0)
    if len(a_idx) < cfg.loop_min_inliers or len(b_idx) < cfg.loop_min_inliers:
        return None
    pa = kf.map_points[a_idx]
    pb = cand.map_points[b_idx]
    ia, ib = match_descriptors(_point_arrays(wm, pa)[1], _point_arrays(wm, pb)[1],
                               max_dist=cfg.hamming_max, ratio=0.75)
    keep = pa[ia] != pb[ib]
    ia, ib = ia[keep], ib[keep]
    if len(ia) < cfg.loop_min_inliers:
        return None
    Xa_w = _point_arrays(wm, pa[ia])[0]
    src = kf.Tcw.apply(Xa_w)
    dst = _point_arrays(wm, pb[ib])[0]
    th = stereo_pair_thresholds(np.maximum(src[:, 2], 0.0), K)
    est = estimate_se3(src, dst, RansacConfig(iterations=300, min_inliers=cfg.loop_min_inliers,
                                              seed=current), thresholds=th)
    if est is None:
        return None
    Twc, inl = est
    # guided matching against the candidate's neighborhood
    _, lp = _group_points(wm, candidate)
    assoc = np.full(len(kf), -1, dtype=np.int64)
    assoc[a_idx[ia[inl]]] = pb[ib[inl]]
    pose = Twc
    for _ in range(2):
        todo = np.array([p for p in lp if p not in set(assoc[assoc >= 0].tolist())], dtype=np.int64)
        if len(todo):
            pos, desc = _point_arrays(wm, todo)
            pi, ki = search_by_projection(kf.uv, kf.ur, kf.octave, kf.descriptors, pose.inverse(),
                                          pos, desc, K, radius=cfg.search_radius,
                                          max_dist=cfg.hamming_max, ratio=cfg.ratio,
                                          exclude_keypoints=assoc >= 0)
            assoc[ki] = todo[pi]
        sel = np.flatnonzero(assoc >= 0)
        if len(sel) < cfg.loop_min_matches:
            return None
        Xs = _point_arrays(wm, assoc[sel])[0]
        meas = np.column_stack([kf.uv[sel], kf.ur[sel]])
        try:
            pose, ok = motion_only_ba(meas, kf.octave[sel], Xs, pose, K)
        except (InsufficientMatches, OptimizationDiverged):
            return None
        assoc[sel[~ok]] = -1
    n_in = int(np.sum(assoc >= 0))
    if n_in < cfg.loop_min_matches:
        return None
    matches = [(int(i), int(assoc[i])) for i in np.flatnonzero(assoc >= 0)]
    return LoopEvent(current, candidate, cand.pose.inverse() @ pose, n_in, pose, matches)


def essential_graph_edges(wm: WorldMap, reference: dict, theta_ess: int, override=None):
    """Spanning-tree, loop and strong covisibility edges measured from ``reference`` poses.

    ``override`` maps (a, b) to a measurement used instead.
    """
    override = override or {}
    edges = {}

    def add(a, b):
        key = (min(a, b), max(a, b))
        if key in edges:
            return
        i, j = key
        Z = override.get(key)
        if Z is None:
            Z = reference[i].inverse() @ reference[j]
        edges[key] = PoseGraphEdge(i, j, Z)

    for k, kf in wm.keyframes.items():
        if kf.parent is not None:
            add(kf.parent, k)
        for o in kf.loop_edges:
            add(k, o)
    for (a, b), w in wm.covisibility_edges().items():
        if w >= theta_ess:
            add(a, b)
    for key in override:
        add(*key)
    return [edges[k] for k in sorted(edges)]


def close_loop(wm: WorldMap, event: LoopEvent, ba_controller, cfg: SystemConfig,
               timings: Timings | None = None) -> dict:
    """Correct the current side rigidly, fuse duplicates, optimize the essential graph,
    then request a full BA."""
    timings = timings or Timings()
    if ba_controller is not None and ba_controller.running:
        ba_controller.abort()
    cur, match = event.current, event.matched
    summary = {"current": cur, "matched": match}
    with wm.mutation_lock, wm.lock.write():
        if cur not in wm.keyframes or match not in wm.keyframes:
            return {"skipped": True}
        with timings.measure("Loop Fusion"):
            old = {k: kf.pose for k, kf in wm.keyframes.items()}
            T_corr = event.corrected_pose @ old[cur].inverse()
            side = [cur, *wm.covisible(cur)]
            loop_group, loop_pts = _group_points(wm, match)
            loop_group = set(loop_group)
            side = [k for k in side if k not in loop_group]
            prev_nbrs = {k: set(wm.covisible(k)) for k in side}
            loop_set = set(loop_pts.tolist())
            moved = set()
            for k in side:
                kf = wm.keyframes[k]
                kf.pose = T_corr @ old[k]
                for p in kf.point_ids():
                    if p in moved or p in loop_set:
                        continue
                    if any(o in loop_group for o in wm.points[p].observations):
                        continue
                    wm.points[p].position = T_corr.apply(wm.points[p].position)
                    moved.add(p)
            fused = 0
            ckf = wm.keyframes[cur]
            for i, p in event.matches:
                p = wm.live_point(p)
                if p < 0 or cur in wm.points[p].observations:
                    continue
                q = int(ckf.map_points[i])
                if q >= 0 and q != p and q not in loop_set:
                    wm.replace_point(q, p)
                    fused += 1
                elif q < 0:
                    wm.add_observation(p, cur, i)
                    fused += 1
            for k in side:
                a, m = fuse_points_into(wm, k, loop_pts, cfg, protected=loop_set)
                fused += a + m
            summary["fused"] = fused
            wm.add_loop_edge(cur, match)
        with timings.measure("Essential Graph Opt."):
            reference = dict(old)
            corrected = {k: wm.keyframes[k].pose for k in wm.keyframes}
            override = {}
            for k in side:
                for n in set(wm.covisible(k)) - prev_nbrs[k] - set(side):
                    key = (min(k, n), max(k, n))
                    override[key] = corrected[key[0]].inverse() @ corrected[key[1]]
            key = (min(cur, match), max(cur, match))
            override[key] = (event.relative.inverse() if cur < match else event.relative)
            for k in corrected:
                reference.setdefault(k, corrected[k])
            edges = essential_graph_edges(wm, {k: reference[k] for k in wm.keyframes},
                                          cfg.theta_ess, override)
            fixed = {match, wm.origin_id}
            result = pose_graph_optimize(corrected, edges, fixed,
                                         LMConfig(max_iterations=20, relative_tolerance=1e-14))
            for pid, mp in wm.points.items():
                ref = mp.reference_kf
                if ref in result:
                    mp.position = (result[ref] @ corrected[ref].inverse()).apply(mp.position)
            for k, T in result.items():
                wm.keyframes[k].pose = T
            summary["edges"] = len(edges)
    if ba_controller is not None:
        ba_controller.launch(cur)
    return summary


class LoopCloser:
    def __init__(self, wm: WorldMap, cfg: SystemConfig, database, ba_controller=None,
                 timings: Timings | None = None):
        self.wm = wm
        self.cfg = cfg
        self.db = database
        self.ba = ba_controller
        self.timings = timings or Timings()
        self.detector = LoopDetector()
        self.last_loop_kf = -10 ** 9
        self.events: list[LoopEvent] = []

    def process(self, kf_id: int) -> LoopEvent | None:
        wm = self.wm
        if kf_id not in wm.keyframes or not self.cfg.loop_closing:
            return None
        if len(wm.keyframes) <= self.cfg.loop_kf_gap or kf_id < self.last_loop_kf + self.cfg.loop_kf_gap:
            return None
        with self.timings.measure("Place Recognition"), wm.lock.read():
            cands = detect_loop_candidates(kf_id, wm, self.db)
            confirmed = self.detector.update(cands, wm)
        for c in confirmed:
            with self.timings.measure("SE3 Estimation"), wm.lock.read():
                if c not in wm.keyframes:
                    continue
                event = validate_loop(wm, kf_id, c, self.cfg)
            if event is not None:
                close_loop(wm, event, self.ba, self.cfg, self.timings)
                self.events.append(event)
                self.last_loop_kf = kf_id
                self.detector.reset()
                return event
        return None
