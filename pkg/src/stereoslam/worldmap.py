"""Keyframes, map points, covisibility graph and spanning tree.

Covisibility weights are maintained incrementally: every time an
observation is linked or unlinked, the shared-point count between the
observing keyframe and each other observer of that point is updated, so the
weights always equal a brute-force recount.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .frame import DESCRIPTOR_BYTES, Frame, SensorKind
from .geometry import Intrinsics, Pose
from .locks import RWLock

MAP_FORMAT_VERSION = 1
COVISIBILITY_THRESHOLD = 15


class Provenance(str, Enum):
    CLOSE = "close"
    FAR = "far"
    MONO = "mono"


def classify_point(depth: float, K: Intrinsics) -> Provenance:
    """Close iff depth < 40 * baseline (strict)."""
    if not depth > 0:
        raise ValueError("depth must be positive")
    return Provenance.CLOSE if depth < K.close_depth else Provenance.FAR


@dataclass(frozen=True)
class KeyframePolicy:
    tau_t: int = 100
    tau_c: int = 70
    max_frames: int = 20
    min_matches: int = 50

    def __post_init__(self):
        if not self.tau_t > self.tau_c > 0:
            raise ValueError("policy requires tau_t > tau_c > 0")


def need_new_keyframe(tracked_close: int, creatable_close: int, frames_since_kf: int,
                      policy: KeyframePolicy = KeyframePolicy(),
                      tracked_matches: int = 0) -> bool:
    close_rule = tracked_close < policy.tau_t and creatable_close >= policy.tau_c
    spacing_rule = (frames_since_kf > policy.max_frames
                    and tracked_matches >= policy.min_matches)
    return close_rule or spacing_rule


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    provenance: Provenance
    reference_kf: int
    created_at: int
    observations: dict[int, int] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return len(self.observations)


@dataclass(eq=False)
class KeyFrame:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose  # camera-to-world
    uv: np.ndarray
    ur: np.ndarray
    octave: np.ndarray
    descriptors: np.ndarray
    map_points: np.ndarray  # point id per keypoint, -1 if none
    sensor: SensorKind = SensorKind.STEREO
    bow: dict = field(default_factory=dict)
    parent: int | None = None
    children: set = field(default_factory=set)
    loop_edges: set = field(default_factory=set)

    @classmethod
    def from_frame(cls, kf_id: int, frame: Frame, pose: Pose, map_points=None) -> "KeyFrame":
        n = len(frame)
        mp = np.full(n, -1, dtype=np.int64) if map_points is None else np.array(map_points, dtype=np.int64)
        return cls(kf_id, frame.index, frame.timestamp, pose, frame.uv.copy(), frame.ur.copy(),
                   frame.octave.copy(), frame.descriptors.copy(), mp, frame.sensor)

    def __len__(self):
        return len(self.uv)

    @property
    def is_stereo(self) -> np.ndarray:
        return ~np.isnan(self.ur)

    def depth(self, K: Intrinsics) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return K.bf / (self.uv[:, 0] - self.ur)

    def as_frame(self) -> Frame:
        return Frame(self.frame_index, self.timestamp, self.uv, self.ur, self.octave,
                     self.descriptors, self.sensor)

    @property
    def Tcw(self) -> Pose:
        return self.pose.inverse()

    def point_ids(self) -> list[int]:
        return [int(p) for p in self.map_points if p >= 0]


class WorldMap:
    def __init__(self, K: Intrinsics, theta_cov: int = COVISIBILITY_THRESHOLD):
        self.K = K
        self.theta_cov = theta_cov
        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.shared: dict[int, dict[int, int]] = {}
        # culled keyframe id -> (parent id, parent^-1 @ culled pose); lets frame
        # poses expressed relative to a culled keyframe be recovered.
        self.culled: dict[int, tuple[int, Pose]] = {}
        self.origin_id: int | None = None
        self.next_kf_id = 0
        self.next_point_id = 0
        self.kf_insertions = 0
        self.recent_points: list[int] = []
        self.replaced: dict[int, int] = {}  # fused point id -> surviving id
        self.lock = RWLock()
        self.mutation_lock = threading.RLock()

    # ------------------------------------------------------------------ points
    def create_point(self, position, descriptor, provenance: Provenance, kf_id: int) -> MapPoint:
        mp = MapPoint(self.next_point_id, np.array(position, dtype=float),
                      np.array(descriptor, dtype=np.uint8).copy(), Provenance(provenance),
                      kf_id, self.kf_insertions)
        self.points[mp.id] = mp
        self.next_point_id += 1
        self.recent_points.append(mp.id)
        return mp

    def add_observation(self, pid: int, kf_id: int, idx: int) -> None:
        mp = self.points[pid]
        kf = self.keyframes[kf_id]
        if kf_id in mp.observations:
            raise ValueError(f"point {pid} already observed by keyframe {kf_id}")
        if kf.map_points[idx] >= 0:
            raise ValueError(f"keypoint {idx} of keyframe {kf_id} already linked")
        for other in mp.observations:
            self._bump(kf_id, other, +1)
        mp.observations[kf_id] = int(idx)
        kf.map_points[idx] = pid

    def erase_observation(self, pid: int, kf_id: int, drop_orphan: bool = True) -> None:
        mp = self.points[pid]
        idx = mp.observations.pop(kf_id)
        self.keyframes[kf_id].map_points[idx] = -1
        for other in mp.observations:
            self._bump(kf_id, other, -1)
        if mp.reference_kf == kf_id and mp.observations:
            mp.reference_kf = min(mp.observations)
        if drop_orphan and not mp.observations:
            del self.points[pid]

    def erase_point(self, pid: int) -> None:
        mp = self.points[pid]
        for kf_id in list(mp.observations):
            self.erase_observation(pid, kf_id, drop_orphan=False)
        del self.points[pid]

    def replace_point(self, old: int, new: int) -> None:
        """Merge duplicate ``old`` into ``new``, keeping link symmetry."""
        if old == new:
            return
        mp_old = self.points[old]
        mp_new = self.points[new]
        for kf_id, idx in list(mp_old.observations.items()):
            self.erase_observation(old, kf_id, drop_orphan=False)
            if kf_id not in mp_new.observations:
                self.add_observation(new, kf_id, idx)
        del self.points[old]
        self.replaced[old] = new

    def live_point(self, pid: int) -> int:
        """Follow fusion replacements; -1 if the point no longer exists."""
        seen = 0
        while pid not in self.points:
            pid = self.replaced.get(pid, -1)
            seen += 1
            if pid < 0 or seen > 64:
                return -1
        return pid

    def update_descriptor(self, pid: int) -> None:
        """Set the point descriptor to the medoid of its observations."""
        from .matching import hamming_matrix

        mp = self.points[pid]
        if mp.n_obs < 2:
            return
        descs = np.array([self.keyframes[k].descriptors[i] for k, i in mp.observations.items()])
        D = hamming_matrix(descs, descs)
        mp.descriptor = descs[int(np.argmin(np.median(D, axis=1)))].copy()

    # --------------------------------------------------------------- keyframes
    def _bump(self, a: int, b: int, delta: int) -> None:
        if a == b:
            return
        for x, y in ((a, b), (b, a)):
            row = self.shared.setdefault(x, {})
            w = row.get(y, 0) + delta
            if w:
                row[y] = w
            else:
                row.pop(y, None)

    def shared_count(self, a: int, b: int) -> int:
        return self.shared.get(a, {}).get(b, 0)

    def covisible(self, kf_id: int, min_weight: int | None = None) -> list[int]:
        """Neighbors with weight >= min_weight, strongest first (ties by id)."""
        th = self.theta_cov if min_weight is None else min_weight
        row = self.shared.get(kf_id, {})
        nbrs = [k for k, w in row.items() if w >= th]
        return sorted(nbrs, key=lambda k: (-row[k], k))

    def covisibility_edges(self) -> dict[tuple[int, int], int]:
        out = {}
        for a, row in self.shared.items():
            for b, w in row.items():
                if a < b and w >= self.theta_cov:
                    out[(a, b)] = w
        return out

    def add_keyframe(self, kf: KeyFrame) -> None:
        self.keyframes[kf.id] = kf
        self.shared.setdefault(kf.id, {})
        self.next_kf_id = max(self.next_kf_id, kf.id + 1)
        if self.origin_id is None:
            self.origin_id = kf.id

    def set_parent(self, kf_id: int, parent: int | None) -> None:
        kf = self.keyframes[kf_id]
        if kf.parent is not None and kf.parent in self.keyframes:
            self.keyframes[kf.parent].children.discard(kf_id)
        kf.parent = parent
        if parent is not None:
            self.keyframes[parent].children.add(kf_id)

    def best_parent(self, kf_id: int) -> int | None:
        row = self.shared.get(kf_id, {})
        cands = [(w, -k) for k, w in row.items() if k in self.keyframes and k != kf_id]
        if cands:
            return -max(cands)[1]
        others = [k for k in self.keyframes if k != kf_id]
        return max(others) if others else None

    def erase_keyframe(self, kf_id: int) -> None:
        if kf_id == self.origin_id:
            raise ValueError("the origin keyframe cannot be removed")
        kf = self.keyframes[kf_id]
        for pid in kf.point_ids():
            self.erase_observation(pid, kf_id)
        parent = kf.parent
        # Re-attach children greedily to the candidate they share most with.
        children = set(kf.children)
        candidates = {parent}
        while children:
            best = None
            for c in sorted(children):
                for cand in sorted(candidates):
                    w = self.shared_count(c, cand)
                    if best is None or w > best[0]:
                        best = (w, c, cand)
            _, c, cand = best
            self.set_parent(c, cand)
            children.discard(c)
            candidates.add(c)
        self.set_parent(kf_id, None)
        for other in list(kf.loop_edges):
            self.keyframes[other].loop_edges.discard(kf_id)
        self.culled[kf_id] = (parent, self.keyframes[parent].pose.inverse() @ kf.pose)
        for other in list(self.shared.get(kf_id, {})):
            self.shared[other].pop(kf_id, None)
        self.shared.pop(kf_id, None)
        del self.keyframes[kf_id]

    def resolve_pose(self, kf_id: int) -> tuple[int, Pose]:
        """Live ancestor of a possibly-culled keyframe and the relative pose to it."""
        rel = Pose.identity()
        while kf_id not in self.keyframes:
            parent, T = self.culled[kf_id]
            rel = T @ rel
            kf_id = parent
        return kf_id, rel

    def add_loop_edge(self, a: int, b: int) -> None:
        self.keyframes[a].loop_edges.add(b)
        self.keyframes[b].loop_edges.add(a)

    # ----------------------------------------------------------------- queries
    def brute_force_weights(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for mp in self.points.values():
            obs = sorted(mp.observations)
            for i, a in enumerate(obs):
                for b in obs[i + 1:]:
                    counts[(a, b)] = counts.get((a, b), 0) + 1
        return counts

    def check_invariants(self) -> None:
        """Raise AssertionError if any structural invariant is broken."""
        for pid, mp in self.points.items():
            assert mp.observations, f"point {pid} has no observations"
            for kf_id, idx in mp.observations.items():
                assert kf_id in self.keyframes, f"point {pid} observed by missing keyframe {kf_id}"
                assert self.keyframes[kf_id].map_points[idx] == pid, f"asymmetric link {pid}/{kf_id}"
        for kf in self.keyframes.values():
            for idx, pid in enumerate(kf.map_points):
                if pid >= 0:
                    assert pid in self.points and self.points[pid].observations.get(kf.id) == idx, \
                        f"keyframe {kf.id} keypoint {idx} links dangling point {pid}"
        bf = self.brute_force_weights()
        inc = {}
        for a, row in self.shared.items():
            for b, w in row.items():
                assert self.shared[b][a] == w, "asymmetric covisibility weight"
                if a < b:
                    inc[(a, b)] = w
        assert inc == bf, "covisibility weights differ from brute-force counts"
        roots = [k for k, kf in self.keyframes.items() if kf.parent is None]
        if self.keyframes:
            assert roots == [self.origin_id], f"spanning tree roots {roots}"
            seen = set()
            stack = [self.origin_id]
            while stack:
                k = stack.pop()
                assert k not in seen, "cycle in spanning tree"
                seen.add(k)
                for c in self.keyframes[k].children:
                    assert self.keyframes[c].parent == k
                    stack.append(c)
            assert seen == set(self.keyframes), "spanning tree does not reach every keyframe"

    # ----------------------------------------------------------- serialization
    def to_dict(self) -> dict:
        kfs = []
        for k in sorted(self.keyframes):
            kf = self.keyframes[k]
            kfs.append({
                "id": kf.id,
                "frame_index": kf.frame_index,
                "timestamp": kf.timestamp,
                "sensor": kf.sensor.value,
                "pose": kf.pose.matrix()[:3, :4].reshape(-1).tolist(),
                "uv": kf.uv.reshape(-1).tolist(),
                "ur": [None if np.isnan(x) else float(x) for x in kf.ur],
                "octave": kf.octave.tolist(),
                "descriptors": kf.descriptors.tobytes().hex(),
                "map_points": kf.map_points.tolist(),
                "bow": [[int(w), float(v)] for w, v in sorted(kf.bow.items())],
                "parent": kf.parent,
                "loop_edges": sorted(kf.loop_edges),
            })
        pts = []
        for p in sorted(self.points):
            mp = self.points[p]
            pts.append({
                "id": mp.id,
                "position": mp.position.tolist(),
                "descriptor": mp.descriptor.tobytes().hex(),
                "provenance": mp.provenance.value,
                "reference_kf": mp.reference_kf,
                "created_at": mp.created_at,
                "observations": sorted([int(k), int(i)] for k, i in mp.observations.items()),
            })
        K = self.K
        return {
            "version": MAP_FORMAT_VERSION,
            "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                           "baseline": K.baseline, "width": K.width, "height": K.height},
            "theta_cov": self.theta_cov,
            "origin_id": self.origin_id,
            "next_kf_id": self.next_kf_id,
            "next_point_id": self.next_point_id,
            "kf_insertions": self.kf_insertions,
            "keyframes": kfs,
            "points": pts,
            "edges": [[a, b, w] for (a, b), w in sorted(self.covisibility_edges().items())],
            "culled": [[k, p, T.matrix()[:3, :4].reshape(-1).tolist()]
                       for k, (p, T) in sorted(self.culled.items())],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_dict(cls, d: dict) -> "WorldMap":
        if d.get("version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map format version {d.get('version')}")
        wm = cls(Intrinsics(**d["intrinsics"]), theta_cov=d["theta_cov"])

        def pose12(v):
            T = np.eye(4)
            T[:3, :4] = np.array(v, dtype=float).reshape(3, 4)
            return Pose.from_matrix(T)

        for e in d["keyframes"]:
            kf = KeyFrame(
                id=e["id"], frame_index=e["frame_index"], timestamp=e["timestamp"],
                pose=pose12(e["pose"]),
                uv=np.array(e["uv"], dtype=float).reshape(-1, 2),
                ur=np.array([np.nan if x is None else x for x in e["ur"]], dtype=float),
                octave=np.array(e["octave"], dtype=np.int64),
                descriptors=np.frombuffer(bytes.fromhex(e["descriptors"]), dtype=np.uint8)
                .reshape(-1, DESCRIPTOR_BYTES).copy(),
                map_points=np.full(len(e["octave"]), -1, dtype=np.int64),
                sensor=SensorKind(e["sensor"]),
                bow={int(w): float(v) for w, v in e["bow"]},
                loop_edges=set(e["loop_edges"]),
            )
            wm.keyframes[kf.id] = kf
            wm.shared.setdefault(kf.id, {})
        for e in d["keyframes"]:
            if e["parent"] is not None:
                wm.set_parent(e["id"], e["parent"])
        for e in d["points"]:
            mp = MapPoint(e["id"], np.array(e["position"], dtype=float),
                          np.frombuffer(bytes.fromhex(e["descriptor"]), dtype=np.uint8).copy(),
                          Provenance(e["provenance"]), e["reference_kf"], e["created_at"])
            wm.points[mp.id] = mp
            for k, i in e["observations"]:
                wm.add_observation(mp.id, k, i)
        wm.origin_id = d["origin_id"]
        wm.next_kf_id = d["next_kf_id"]
        wm.next_point_id = d["next_point_id"]
        wm.kf_insertions = d["kf_insertions"]
        wm.culled = {k: (p, pose12(T)) for k, p, T in d["culled"]}
        edges = {(a, b): w for a, b, w in d["edges"]}
        if edges != wm.covisibility_edges():
            raise ValueError("stored covisibility edges disagree with observations")
        return wm

    @classmethod
    def load(cls, path) -> "WorldMap":
        return cls.from_dict(json.loads(Path(path).read_bytes()))


def insert_keyframe(wm: WorldMap, frame: Frame, pose: Pose, map_points=None) -> KeyFrame:
    """Add a keyframe built from ``frame``, linking its tracked map points.

    ``map_points`` gives, per keypoint, the id of the matched map point (or -1).
    The spanning-tree parent becomes the keyframe sharing the most points.
    """
    kf = KeyFrame.from_frame(wm.next_kf_id, frame, pose)
    wm.add_keyframe(kf)
    wm.kf_insertions += 1
    if map_points is not None:
        for idx, pid in enumerate(np.asarray(map_points)):
            pid = int(pid)
            if pid >= 0 and pid in wm.points and kf.id not in wm.points[pid].observations:
                wm.add_observation(pid, kf.id, idx)
    if kf.id != wm.origin_id:
        wm.set_parent(kf.id, wm.best_parent(kf.id))
    return kf


def cull_keyframes(wm: WorldMap, candidates=None, protected=(), redundancy: float = 0.9,
                   min_observers: int = 3) -> list[int]:
    """Remove keyframes whose points are mostly seen elsewhere at equal or finer scale."""
    protected = set(protected)
    if candidates is None:
        candidates = sorted(wm.keyframes)
    removed = []
    for k in candidates:
        if k == wm.origin_id or k in protected or k not in wm.keyframes:
            continue
        kf = wm.keyframes[k]
        if kf.loop_edges:
            continue
        pids = kf.point_ids()
        if not pids:
            continue
        redundant = 0
        for pid in pids:
            mp = wm.points[pid]
            own_octave = kf.octave[mp.observations[k]]
            n = 0
            for other, idx in mp.observations.items():
                if other != k and wm.keyframes[other].octave[idx] <= own_octave:
                    n += 1
                    if n >= min_observers:
                        redundant += 1
                        break
        if redundant >= redundancy * len(pids):
            wm.erase_keyframe(k)
            removed.append(k)
    return removed


def cull_map_points(wm: WorldMap) -> list[int]:
    """Check recently created points once they are older than two keyframes."""
    removed = []
    keep = []
    for pid in wm.recent_points:
        mp = wm.points.get(pid)
        if mp is None:
            continue
        if wm.kf_insertions - mp.created_at <= 2:
            keep.append(pid)
            continue
        min_obs = 2 if mp.provenance == Provenance.CLOSE else 3
        if mp.n_obs < min_obs:
            wm.erase_point(pid)
            removed.append(pid)
    wm.recent_points = keep
    return removed


def local_window(wm: WorldMap, kf_id: int):
    """Return (K_L, K_F, P_L) for local bundle adjustment around ``kf_id``."""
    K_L = {kf_id, *wm.covisible(kf_id)}
    P_L = set()
    for k in K_L:
        P_L.update(wm.keyframes[k].point_ids())
    K_F = set()
    for pid in P_L:
        K_F.update(o for o in wm.points[pid].observations if o not in K_L)
    return K_L, K_F, P_L
