"""Bag-of-words place recognition over binary descriptors.

A small hierarchical vocabulary (k-medians in Hamming space with a
majority-bit center update) quantizes descriptors into words; keyframes are
indexed by word in an inverted file.  Loop candidates are validated
geometrically with a RANSAC rigid alignment of matched 3D points.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame import DESCRIPTOR_BYTES, Frame
from .geometry import Intrinsics, Pose, backproject_batch
from .locks import RWLock
from .matching import hamming_matrix, hamming_pairs, match_descriptors, search_by_projection

VOCAB_MAGIC = b"STEREOSLAM-VOCAB\n"
LOOP_ALPHA = 0.75
LOOP_MIN_ZSCORE = 3.0
CONSISTENCY_QUERIES = 3
RELOC_MIN_INLIERS = 50


def hamming(a, b) -> int:
    """Number of differing bits between two 256-bit descriptors."""
    return int(hamming_pairs(np.asarray(a, np.uint8).reshape(1, -1),
                             np.asarray(b, np.uint8).reshape(1, -1))[0])


# ---------------------------------------------------------------- vocabulary
def _majority(descs: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(descs, axis=1)
    return np.packbits(2 * bits.sum(axis=0, dtype=np.int64) > len(descs)).astype(np.uint8)


def _seed_centers(descs, k, rng):
    """k-means++ seeding with Hamming distance; may return fewer than k centers."""
    idx = [int(rng.integers(len(descs)))]
    d = hamming_matrix(descs, descs[idx]).min(axis=1).astype(float)
    while len(idx) < k:
        w = d * d
        total = w.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(len(descs), p=w / total))
        idx.append(nxt)
        d = np.minimum(d, hamming_matrix(descs, descs[[nxt]])[:, 0])
    return descs[idx].copy()


def _kmedians(descs, k, rng, max_iter=20):
    centers = _seed_centers(descs, k, rng)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(hamming_matrix(descs, centers), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        keep = []
        for c in range(len(centers)):
            members = descs[assign == c]
            if len(members):
                centers[c] = _majority(members)
                keep.append(c)
        if len(keep) < len(centers):
            centers = centers[keep]
            assign = None
    assign = np.argmin(hamming_matrix(descs, centers), axis=1)
    return centers, assign


class Vocabulary:
    """Descriptor tree: node 0 is the root, leaves are words."""

    def __init__(self, k, L, seed, centers, children, words, idf):
        self.k, self.L, self.seed = int(k), int(L), int(seed)
        self.centers = centers      # (n_nodes, 32) uint8; root row unused
        self.children = children    # (n_nodes, k) int32, -1 padded
        self.words = words          # (n_nodes,) word id of leaves, -1 otherwise
        self.idf = idf              # (n_words,) float64

    @property
    def n_words(self) -> int:
        return len(self.idf)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.words >= 0)

    def quantize(self, descriptors) -> np.ndarray:
        """Word id of every descriptor (greedy descent)."""
        descs = np.asarray(descriptors, np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        node = np.zeros(len(descs), dtype=np.int64)
        for _ in range(self.L):
            ch = self.children[node]
            has = ch[:, 0] >= 0
            if not has.any():
                break
            sub = ch[has]
            valid = sub >= 0
            cd = self.centers[np.where(valid, sub, 0)]
            d = np.bitwise_count(cd ^ descs[has][:, None, :]).sum(axis=2, dtype=np.int64)
            d = np.where(valid, d, 1 << 20)
            node[has] = sub[np.arange(len(sub)), np.argmin(d, axis=1)]
        return self.words[node]

    def to_bytes(self) -> bytes:
        header = json.dumps({"k": self.k, "L": self.L, "seed": self.seed,
                             "nodes": len(self.words), "words": self.n_words},
                            sort_keys=True).encode()
        return b"".join([
            VOCAB_MAGIC, struct.pack("<I", len(header)), header,
            self.centers.astype(np.uint8).tobytes(),
            self.children.astype("<i4").tobytes(),
            self.words.astype("<i4").tobytes(),
            self.idf.astype("<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Vocabulary":
        if not data.startswith(VOCAB_MAGIC):
            raise ValueError("not a vocabulary file")
        pos = len(VOCAB_MAGIC)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        h = json.loads(data[pos:pos + n])
        pos += n
        nodes, k, nw = h["nodes"], h["k"], h["words"]

        def take(count, dtype):
            nonlocal pos
            size = count * np.dtype(dtype).itemsize
            arr = np.frombuffer(data[pos:pos + size], dtype=dtype).copy()
            pos += size
            return arr

        centers = take(nodes * DESCRIPTOR_BYTES, np.uint8).reshape(nodes, DESCRIPTOR_BYTES)
        children = take(nodes * k, "<i4").reshape(nodes, k).astype(np.int64)
        words = take(nodes, "<i4").astype(np.int64)
        idf = take(nw, "<f8")
        if pos != len(data):
            raise ValueError("trailing bytes in vocabulary file")
        return cls(k, h["L"], h["seed"], centers, children, words, idf)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_bytes(Path(path).read_bytes())


def build_vocabulary(descriptors, k: int = 10, L: int = 3, seed: int = 0) -> Vocabulary:
    """Train a k-ary, depth-L vocabulary.

    ``descriptors`` is an (N, 32) array or a list of per-image arrays; with a
    list, inverse document frequencies are counted per image, otherwise per
    descriptor.
    """
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    if isinstance(descriptors, (list, tuple)):
        docs = [np.asarray(d, np.uint8).reshape(-1, DESCRIPTOR_BYTES) for d in descriptors]
        docs = [d for d in docs if len(d)]
        allv = np.concatenate(docs) if docs else np.zeros((0, DESCRIPTOR_BYTES), np.uint8)
    else:
        allv = np.asarray(descriptors, np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        docs = None
    if len(allv) < k:
        raise ValueError(f"{len(allv)} descriptors, need at least k={k}")
    rng = np.random.default_rng(seed)

    centers = [np.zeros(DESCRIPTOR_BYTES, np.uint8)]
    children = [[]]
    stack = [(0, allv, 0)]
    while stack:
        node, descs, depth = stack.pop()
        if depth == L:
            continue
        if len(descs) <= k:
            uniq = np.unique(descs, axis=0)
            groups = [(c, descs[np.all(descs == c, axis=1)]) for c in uniq]
        else:
            cs, assign = _kmedians(descs, k, rng)
            groups = [(cs[c], descs[assign == c]) for c in range(len(cs))]
        for c, members in groups:
            cid = len(centers)
            centers.append(np.asarray(c, np.uint8))
            children.append([])
            children[node].append(cid)
            if len(members) > 1 and len(np.unique(members, axis=0)) > 1:
                stack.append((cid, members, depth + 1))
    n = len(centers)
    ch = np.full((n, k), -1, dtype=np.int64)
    for i, c in enumerate(children):
        ch[i, :len(c)] = c
    words = np.full(n, -1, dtype=np.int64)
    leaf = np.array([i for i in range(1, n) if not children[i]], dtype=np.int64)
    words[leaf] = np.arange(len(leaf))
    vocab = Vocabulary(k, L, seed, np.array(centers, np.uint8), ch, words, np.zeros(len(leaf)))

    if docs is None:
        ids = vocab.quantize(allv)
        counts = np.bincount(ids, minlength=len(leaf))
        n_docs = len(allv)
    else:
        counts = np.zeros(len(leaf), dtype=np.int64)
        for d in docs:
            counts[np.unique(vocab.quantize(d))] += 1
        n_docs = len(docs)
    vocab.idf = np.log(n_docs / np.maximum(counts, 1)).astype(float)
    return vocab


def bow_vector(descriptors, vocab: Vocabulary) -> dict[int, float]:
    """L1-normalized tf-idf word histogram."""
    descs = np.asarray(descriptors, np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(descs) == 0:
        return {}
    ids = vocab.quantize(descs)
    words, counts = np.unique(ids, return_counts=True)
    w = counts / len(ids) * vocab.idf[words]
    if w.sum() <= 0:
        w = counts.astype(float)
    keep = w > 0
    words, w = words[keep], w[keep]
    w = w / w.sum()
    return {int(a): float(b) for a, b in zip(words, w)}


def score(v: dict, w: dict) -> float:
    """s(v, w) = 1 - |v - w|_1 / 2 on L1-normalized vectors."""
    if not v or not w:
        return 0.0
    l1 = 0.0
    for word, a in v.items():
        l1 += abs(a - w.get(word, 0.0))
    for word, b in w.items():
        if word not in v:
            l1 += b
    return 1.0 - 0.5 * l1


# ------------------------------------------------------------------ database
class KeyFrameDatabase:
    """Inverted index word -> keyframe ids; one writer, many readers."""

    def __init__(self):
        self.index: dict[int, set[int]] = {}
        self.bows: dict[int, dict] = {}
        self.lock = RWLock()

    def __len__(self):
        return len(self.bows)

    def add(self, kf_id: int, bow: dict) -> None:
        with self.lock.write():
            self.bows[kf_id] = dict(bow)
            for word in bow:
                self.index.setdefault(word, set()).add(kf_id)

    def erase(self, kf_id: int) -> None:
        with self.lock.write():
            bow = self.bows.pop(kf_id, None)
            for word in bow or ():
                ids = self.index.get(word)
                if ids is not None:
                    ids.discard(kf_id)
                    if not ids:
                        del self.index[word]

    def common_words(self, bow: dict, exclude=()) -> dict[int, int]:
        exclude = set(exclude)
        with self.lock.read():
            out: dict[int, int] = {}
            for word in bow:
                for k in self.index.get(word, ()):
                    if k not in exclude:
                        out[k] = out.get(k, 0) + 1
            return out

    def query(self, bow: dict, exclude=(), min_common_ratio: float = 0.8) -> list[tuple[int, float]]:
        """Keyframes sharing words with ``bow``, best score first."""
        common = self.common_words(bow, exclude)
        if not common:
            return []
        th = min_common_ratio * max(common.values())
        with self.lock.read():
            hits = [(k, score(bow, self.bows[k])) for k, c in common.items() if c >= th]
        return sorted(hits, key=lambda x: (-x[1], x[0]))


def detect_loop_candidates(kf_id: int, wm, database: KeyFrameDatabase,
                           alpha: float = LOOP_ALPHA, min_zscore: float = LOOP_MIN_ZSCORE) -> list[int]:
    """Keyframes whose similarity beats alpha times the weakest covisible neighbor.

    Covisible neighbors (any shared point) and the query itself are never
    returned.  A small vocabulary gives every pair of frames a similar
    baseline score, so a hit must also stand ``min_zscore`` robust standard
    deviations (scaled MAD) above the median score of the other keyframes.  Candidates are
    grouped with their own covisible neighbors and only groups whose
    accumulated score is near the best survive.
    """
    kf = wm.keyframes[kf_id]
    bow = kf.bow
    if not bow or len(database) == 0:
        return []
    strong = wm.covisible(kf_id)
    excluded = {kf_id, *wm.covisible(kf_id, min_weight=1)}
    min_score = 1.0
    for n in strong:
        other = wm.keyframes[n].bow
        if other:
            min_score = min(min_score, score(bow, other))
    floor = alpha * min_score
    if min_zscore > 0:
        every = np.array([x for _, x in database.query(bow, exclude=excluded, min_common_ratio=0.0)])
        if len(every) >= 5:
            med = np.median(every)
            mad = 1.4826 * np.median(np.abs(every - med))
            floor = max(floor, med + min_zscore * mad)
    hits = [(k, s) for k, s in database.query(bow, exclude=excluded) if s >= floor]
    if not hits:
        return []
    scores = dict(hits)
    best_acc = 0.0
    acc = {}
    for k, s in hits:
        group = [k] + ([n for n in wm.covisible(k)[:10]] if k in wm.keyframes else [])
        acc[k] = sum(scores.get(g, 0.0) for g in group)
        best_acc = max(best_acc, acc[k])
    return sorted(k for k, _ in hits if acc[k] >= 0.75 * best_acc and k in wm.keyframes)


@dataclass
class _Group:
    members: set
    count: int


class LoopDetector:
    """Temporal consistency: a candidate group must recur in consecutive
    queries before it is reported."""

    def __init__(self, required: int = CONSISTENCY_QUERIES):
        self.required = required
        self.groups: list[_Group] = []

    def reset(self) -> None:
        self.groups = []

    def update(self, candidates, wm) -> list[int]:
        """Feed the candidates of one query; return the consistent ones."""
        new_groups: list[_Group] = []
        confirmed = []
        for c in candidates:
            members = {c, *wm.covisible(c)} if c in wm.keyframes else {c}
            count = 1
            for g in self.groups:
                if g.members & members:
                    count = max(count, g.count + 1)
            new_groups.append(_Group(members, count))
            if count >= self.required:
                confirmed.append(c)
        self.groups = new_groups
        return confirmed


# ---------------------------------------------------------- rigid alignment
@dataclass
class RansacConfig:
    iterations: int = 200
    threshold: float = 0.05  # meters
    min_inliers: int = 3
    seed: int = 0


def horn_alignment(src, dst, weights=None) -> Pose:
    """Closed-form rigid transform T with dst ~ T(src) (unit-quaternion method)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    S = ((src - cs) * w[:, None]).T @ (dst - cd)
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    q0, qx, qy, qz = vecs[:, -1] / np.linalg.norm(vecs[:, -1])
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    # re-orthonormalize against rounding
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return Pose(R, cd - R @ cs)


def _degenerate(P, eps=1e-6) -> bool:
    a, b, c = P
    scale = max(np.linalg.norm(b - a), np.linalg.norm(c - a), 1e-12)
    return np.linalg.norm(np.cross(b - a, c - a)) < eps * scale * scale


def estimate_se3(src, dst, config: RansacConfig | None = None, thresholds=None):
    """RANSAC + Horn rigid alignment of matched 3D points.

    Returns (Pose T with dst ~ T(src), inlier mask) or None when fewer than
    ``config.min_inliers`` pairs agree.  ``thresholds`` optionally gives one
    inlier distance per pair.
    """
    config = config or RansacConfig()
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n != len(dst):
        raise ValueError("point sets differ in length")
    if n < 3:
        raise ValueError("need at least 3 point pairs")
    th = np.full(n, config.threshold) if thresholds is None else np.asarray(thresholds, dtype=float)
    rng = np.random.default_rng(config.seed)

    def inliers_of(T):
        return np.linalg.norm(dst - T.apply(src), axis=1) < th

    best = None
    best_n = 0
    for _ in range(config.iterations):
        idx = rng.choice(n, 3, replace=False)
        if _degenerate(src[idx]) or _degenerate(dst[idx]):
            continue
        T = horn_alignment(src[idx], dst[idx])
        inl = inliers_of(T)
        c = int(inl.sum())
        if c > best_n:
            best, best_n = inl, c
            if c == n:
                break
    if best is None or best_n < max(config.min_inliers, 3):
        return None
    inl = best
    T = None
    for _ in range(3):
        if inl.sum() < 3 or _degenerate_set(src[inl]):
            break
        T = horn_alignment(src[inl], dst[inl])
        new = inliers_of(T)
        if np.array_equal(new, inl):
            break
        if new.sum() < config.min_inliers:
            break
        inl = new
    if T is None or inl.sum() < config.min_inliers:
        return None
    return T, inl


def _degenerate_set(P) -> bool:
    if len(P) < 3:
        return True
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return s[1] < 1e-9 * max(s[0], 1e-12)


def stereo_pair_thresholds(depths, K: Intrinsics, base: float = RansacConfig.threshold,
                           pixel_sigma: float = 1.0, k_sigma: float = 3.0) -> np.ndarray:
    """Per-pair alignment thresholds growing with stereo depth uncertainty."""
    sz = np.asarray(depths, dtype=float) ** 2 / K.bf * pixel_sigma
    return np.maximum(base, k_sigma * np.sqrt(2.0) * sz)


# ------------------------------------------------------------ relocalization
@dataclass
class RelocResult:
    pose: Pose               # camera-to-world
    map_points: np.ndarray
    kf_id: int
    inliers: int
    candidates: list = field(default_factory=list)


def local_points(wm, kf_ids) -> np.ndarray:
    pids = set()
    for k in kf_ids:
        if k in wm.keyframes:
            pids.update(wm.keyframes[k].point_ids())
    return np.array(sorted(pids), dtype=np.int64)


def relocalize(frame: Frame, wm, vocab: Vocabulary, database: KeyFrameDatabase,
               min_inliers: int = RELOC_MIN_INLIERS, max_candidates: int = 5,
               ransac: RansacConfig | None = None) -> RelocResult | None:
    """Recover the pose of ``frame`` against the map, or None."""
    from .optim import InsufficientMatches, OptimizationDiverged, motion_only_ba

    if not wm.keyframes or len(frame) == 0:
        return None
    K = wm.K
    bow = bow_vector(frame.descriptors, vocab)
    hits = database.query(bow)
    if not hits:
        return None
    top = hits[0][1]
    cands = [k for k, s in hits if s >= 0.75 * top and k in wm.keyframes][:max_candidates]
    stereo = frame.is_stereo
    for k in cands:
        kf = wm.keyframes[k]
        linked = np.flatnonzero(kf.map_points >= 0)
        if len(linked) < 15:
            continue
        fi, ki = match_descriptors(frame.descriptors, kf.descriptors[linked])
        if len(fi) < 15:
            continue
        pids = kf.map_points[linked[ki]]
        Xw = np.array([wm.points[p].position for p in pids])
        st = stereo[fi]
        if st.sum() < 6:
            continue
        Xc = backproject_batch(frame.uv[fi[st]], frame.ur[fi[st]], K)
        th = stereo_pair_thresholds(Xc[:, 2], K)
        cfg = ransac or RansacConfig(min_inliers=10)
        est = estimate_se3(Xc, Xw[st], cfg, thresholds=th)
        if est is None:
            continue
        Twc, _ = est
        try:
            pose, inl = motion_only_ba(_meas(frame, fi), frame.octave[fi], Xw, Twc, K)
        except (InsufficientMatches, OptimizationDiverged):
            continue
        if inl.sum() < 10:
            continue
        # widen support with the candidate's covisible neighborhood
        assoc = np.full(len(frame), -1, dtype=np.int64)
        assoc[fi[inl]] = pids[inl]
        group = [k, *wm.covisible(k)]
        lp = np.array([p for p in local_points(wm, group) if p not in set(assoc[assoc >= 0])],
                      dtype=np.int64)
        if len(lp):
            pos = np.array([wm.points[p].position for p in lp])
            desc = np.array([wm.points[p].descriptor for p in lp])
            pi, kpi = search_by_projection(frame.uv, frame.ur, frame.octave, frame.descriptors,
                                           pose.inverse(), pos, desc, K,
                                           exclude_keypoints=assoc >= 0)
            assoc[kpi] = lp[pi]
        sel = np.flatnonzero(assoc >= 0)
        if len(sel) < min_inliers:
            continue
        Xs = np.array([wm.points[p].position for p in assoc[sel]])
        try:
            pose, inl = motion_only_ba(_meas(frame, sel), frame.octave[sel], Xs, pose, K)
        except (InsufficientMatches, OptimizationDiverged):
            continue
        if inl.sum() >= min_inliers:
            out = np.full(len(frame), -1, dtype=np.int64)
            out[sel[inl]] = assoc[sel[inl]]
            return RelocResult(pose, out, k, int(inl.sum()), cands)
    return None


def _meas(frame: Frame, idx) -> np.ndarray:
    return np.column_stack([frame.uv[idx], frame.ur[idx]])
