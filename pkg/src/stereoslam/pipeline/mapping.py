"""Local mapping: keyframe insertion, point creation and culling, local BA."""
from __future__ import annotations

import logging

import numpy as np

from ..frame import Frame
from ..geometry import Pose, backproject_batch, level_sigma2, project_batch, triangulate_batch
from ..matching import match_descriptors, search_by_projection
from ..optim import (CHI2_MONO, CHI2_MONO_GROSS, CHI2_STEREO, CHI2_STEREO_GROSS, optimize_bundle,
                     problem_from_map)
from ..place_recognition import bow_vector
from ..worldmap import (Provenance, WorldMap, cull_keyframes, cull_map_points, insert_keyframe,
                        local_window)
from .config import SystemConfig
from .timing import Timings

log = logging.getLogger(__name__)


def reprojection_chi2(Tcw: Pose, uv, ur, octave, X, K) -> np.ndarray:
    """Normalized squared reprojection error per keypoint; inf behind the camera."""
    Xc = Tcw.apply(np.asarray(X, dtype=float).reshape(-1, 3))
    front = Xc[:, 2] > 1e-3
    proj = project_batch(np.where(front[:, None], Xc, [0.0, 0.0, 1.0]), K)
    meas = np.column_stack([uv, ur])
    stereo = ~np.isnan(meas[:, 2])
    e = meas - proj
    e[~stereo, 2] = 0.0
    r2 = np.einsum("ij,ij->i", e, e) / level_sigma2(octave)
    return np.where(front, r2, np.inf)


def chi2_cutoffs(ur, gross: bool = False) -> np.ndarray:
    stereo = ~np.isnan(np.asarray(ur, dtype=float))
    if gross:
        return np.where(stereo, CHI2_STEREO_GROSS, CHI2_MONO_GROSS)
    return np.where(stereo, CHI2_STEREO, CHI2_MONO)


def chi2_ok(kf, idx, X, K, gross: bool = False) -> np.ndarray:
    """Reprojection test of world points X against keypoints ``idx`` of a keyframe or frame.

    ``gross`` uses the 99.9% cutoffs, for links tested against estimates that
    carry their own noise.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return np.zeros(0, dtype=bool)
    r2 = reprojection_chi2(kf.Tcw, kf.uv[idx], kf.ur[idx], kf.octave[idx], X, K)
    return r2 < chi2_cutoffs(kf.ur[idx], gross)


def _point_arrays(wm, pids):
    pos = np.array([wm.points[p].position for p in pids]).reshape(-1, 3)
    desc = np.array([wm.points[p].descriptor for p in pids], dtype=np.uint8).reshape(-1, 32)
    return pos, desc


def fuse_points_into(wm: WorldMap, kf_id: int, pids, cfg: SystemConfig,
                     protected=frozenset()) -> tuple[int, int]:
    """Project points into a keyframe; link free keypoints, merge duplicates.

    Returns (links added, points merged).  Points in ``protected`` survive
    a merge.
    """
    kf = wm.keyframes[kf_id]
    pids = np.array([p for p in pids if p in wm.points and kf_id not in wm.points[p].observations],
                    dtype=np.int64)
    if len(pids) == 0:
        return 0, 0
    pos, desc = _point_arrays(wm, pids)
    pi, ki = search_by_projection(kf.uv, kf.ur, kf.octave, kf.descriptors, kf.Tcw, pos, desc, wm.K,
                                  radius=cfg.fusion_radius,
                                  max_dist=cfg.hamming_max, ratio=cfg.ratio)
    ok = chi2_ok(kf, ki, pos[pi], wm.K, gross=True)
    added = merged = 0
    for p, i in zip(pids[pi[ok]], ki[ok]):
        p = wm.live_point(int(p))
        if p < 0 or kf_id in wm.points[p].observations:
            continue
        q = int(kf.map_points[i])
        if q < 0:
            wm.add_observation(p, kf_id, int(i))
            added += 1
        elif q != p:
            if q in protected and p in protected:
                continue
            if q in protected or (p not in protected and wm.points[q].n_obs >= wm.points[p].n_obs):
                wm.replace_point(p, q)
            else:
                wm.replace_point(q, p)
            merged += 1
    return added, merged


class LocalMapper:
    def __init__(self, wm: WorldMap, cfg: SystemConfig, vocab, database, timings: Timings | None = None):
        self.wm = wm
        self.cfg = cfg
        self.vocab = vocab
        self.db = database
        self.timings = timings or Timings()
        self.protected: set[int] = set()
        self.ba_log: list = []

    # -------------------------------------------------------------- creation
    def create_close_points(self, kf) -> int:
        K = self.wm.K
        free = (kf.map_points < 0) & kf.is_stereo
        idx = np.flatnonzero(free & (kf.depth(K) < K.close_depth))
        if len(idx) == 0:
            return 0
        Xw = kf.pose.apply(backproject_batch(kf.uv[idx], kf.ur[idx], K))
        for i, X in zip(idx, Xw):
            mp = self.wm.create_point(X, kf.descriptors[i], Provenance.CLOSE, kf.id)
            self.wm.add_observation(mp.id, kf.id, int(i))
        return len(idx)

    def triangulate_new_points(self, kf) -> int:
        """Two-view triangulation of unmatched far / mono keypoints with covisible keyframes."""
        wm = self.wm
        K = wm.K
        nbrs = wm.covisible(kf.id)[:self.cfg.triangulation_neighbors]
        if len(nbrs) < 2:
            nbrs = wm.covisible(kf.id, min_weight=1)[:self.cfg.triangulation_neighbors]
        created = 0
        for nb_id in nbrs:
            nb = wm.keyframes[nb_id]
            if np.linalg.norm(nb.pose.translation - kf.pose.translation) < K.baseline:
                continue
            ca = np.flatnonzero(kf.map_points < 0)
            cb = np.flatnonzero(nb.map_points < 0)
            if len(ca) == 0 or len(cb) == 0:
                continue
            ia, ib = match_descriptors(kf.descriptors[ca], nb.descriptors[cb],
                                       max_dist=self.cfg.hamming_max, ratio=self.cfg.ratio)
            if len(ia) == 0:
                continue
            a, b = ca[ia], cb[ib]
            X, ok = triangulate_batch(kf.uv[a], kf.pose, nb.uv[b], nb.pose, K)
            ok &= chi2_ok(kf, a, X, K) & chi2_ok(nb, b, X, K)
            for i, j, Xw in zip(a[ok], b[ok], X[ok]):
                prov = Provenance.FAR if not np.isnan(kf.ur[i]) else Provenance.MONO
                mp = wm.create_point(Xw, kf.descriptors[i], prov, kf.id)
                wm.add_observation(mp.id, kf.id, int(i))
                wm.add_observation(mp.id, nb_id, int(j))
                created += 1
        return created

    def fuse_neighbors(self, kf) -> int:
        wm = self.wm
        first = wm.covisible(kf.id)[:self.cfg.fusion_neighbors]
        targets = list(first)
        for k in first:
            for n in wm.covisible(k)[:5]:
                if n != kf.id and n not in targets:
                    targets.append(n)
        n_fused = 0
        own = kf.point_ids()
        for t in targets:
            a, m = fuse_points_into(wm, t, own, self.cfg)
            n_fused += a + m
            own = [wm.live_point(p) for p in own]
            own = [p for p in own if p >= 0]
        theirs = set()
        for t in targets:
            theirs.update(wm.keyframes[t].point_ids())
        a, m = fuse_points_into(wm, kf.id, sorted(theirs), self.cfg)
        n_fused += a + m
        for p in kf.point_ids():
            wm.update_descriptor(p)
        return n_fused

    # ------------------------------------------------------------------ step
    def step(self, frame: Frame, pose: Pose, map_points) -> dict:
        """Insert a keyframe and run the full local mapping sequence."""
        wm = self.wm
        t = self.timings
        summary = {}
        with wm.mutation_lock:
            with t.measure("Keyframe Insertion"), wm.lock.write():
                mp = np.array([wm.live_point(int(p)) if p >= 0 else -1 for p in map_points])
                kf = insert_keyframe(wm, frame, pose, mp)
                if self.vocab is not None:
                    kf.bow = bow_vector(kf.descriptors, self.vocab)
                for p in kf.point_ids():
                    wm.update_descriptor(p)
            if self.db is not None:
                self.db.add(kf.id, kf.bow)
            summary["kf_id"] = kf.id
            with t.measure("Map Point Culling"), wm.lock.write():
                summary["culled_points"] = len(cull_map_points(wm))
            with t.measure("Map Point Creation"), wm.lock.write():
                summary["close_points"] = self.create_close_points(kf)
                summary["triangulated"] = self.triangulate_new_points(kf)
                summary["fused"] = self.fuse_neighbors(kf)
            with t.measure("Local BA"):
                summary.update(self.run_local_ba(kf.id))
            with t.measure("Keyframe Culling"), wm.lock.write():
                cands = [k for k in wm.covisible(kf.id)]
                removed = cull_keyframes(wm, candidates=cands, protected={kf.id, *self.protected})
            for k in removed:
                if self.db is not None:
                    self.db.erase(k)
            summary["culled_keyframes"] = removed
        return summary

    def run_local_ba(self, kf_id: int) -> dict:
        wm = self.wm
        with wm.lock.read():
            K_L, K_F, P_L = local_window(wm, kf_id)
            if len(K_L) < 2 or not P_L:
                return {"local_ba": 0}
            prob = problem_from_map(wm, K_L, K_F, P_L)
        res = optimize_bundle(prob, self.cfg.local_ba, log=self.ba_log)
        with wm.lock.write():
            for k, T in res.poses.items():
                if k in wm.keyframes:
                    wm.keyframes[k].pose = T
            for p, X in res.points.items():
                if p in wm.points:
                    wm.points[p].position = X
            n_out = 0
            for p, k in res.outliers:
                if p in wm.points and k in wm.points[p].observations:
                    wm.erase_observation(p, k)
                    n_out += 1
        return {"local_ba": len(K_L), "outliers": n_out}
