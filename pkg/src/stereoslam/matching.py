"""Descriptor matching: projection-guided search and brute-force matching."""
from __future__ import annotations

import numpy as np

from .geometry import SCALE_FACTOR, Intrinsics, Pose

HAMMING_MAX = 50
RATIO = 0.9
SEARCH_RADIUS = 15.0


def hamming_matrix(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.uint8).reshape(-1, 32)
    B = np.asarray(B, dtype=np.uint8).reshape(-1, 32)
    return np.bitwise_count(A[:, None, :] ^ B[None, :, :]).sum(axis=2, dtype=np.int64)


def hamming_pairs(A, B) -> np.ndarray:
    """Row-wise distances between equally long descriptor arrays."""
    return np.bitwise_count(np.asarray(A, np.uint8) ^ np.asarray(B, np.uint8)).sum(axis=1, dtype=np.int64)


def _best_per_group(groups, dists, others, max_dist, ratio):
    """For each group id pick the closest candidate passing the ratio test.

    Returns (group, other, dist) arrays.
    """
    if len(groups) == 0:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e
    order = np.lexsort((others, dists, groups))
    g, d, o = groups[order], dists[order], others[order]
    first = np.ones(len(g), dtype=bool)
    first[1:] = g[1:] != g[:-1]
    idx_first = np.flatnonzero(first)
    has_second = np.zeros(len(idx_first), dtype=bool)
    second_d = np.full(len(idx_first), np.iinfo(np.int64).max)
    nxt = idx_first + 1
    ok = nxt < len(g)
    ok[ok] = g[nxt[ok]] == g[idx_first[ok]]
    has_second[ok] = True
    second_d[ok] = d[nxt[ok]]
    best_d = d[idx_first]
    keep = best_d <= max_dist
    keep &= ~has_second | (best_d <= ratio * second_d)
    sel = idx_first[keep]
    return g[sel], o[sel], d[sel]


def _unique_targets(src, dst, dist):
    """Keep only the closest source per target index."""
    if len(src) == 0:
        return src, dst, dist
    order = np.lexsort((src, dist, dst))
    s, t, d = src[order], dst[order], dist[order]
    first = np.ones(len(t), dtype=bool)
    first[1:] = t[1:] != t[:-1]
    return s[first], t[first], d[first]


def search_by_projection(uv, ur, octave, descriptors, Tcw: Pose, positions, point_desc,
                         K: Intrinsics, radius: float = SEARCH_RADIUS,
                         max_dist: int = HAMMING_MAX, ratio: float = RATIO,
                         exclude_keypoints=None):
    """Match 3D points to keypoints near their projection.

    Returns (point_index, keypoint_index) arrays; each keypoint is used at most
    once (the closest descriptor wins).
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    e = np.zeros(0, dtype=np.int64)
    if len(positions) == 0 or len(uv) == 0:
        return e, e
    Xc = Tcw.apply(positions)
    z = Xc[:, 2]
    front = z > 0.1
    zs = np.where(front, z, 1.0)
    u = K.fx * Xc[:, 0] / zs + K.cx
    v = K.fy * Xc[:, 1] / zs + K.cy
    urp = u - K.bf / zs
    vis = front & K.in_image(u, v)
    pidx = np.flatnonzero(vis)
    if len(pidx) == 0:
        return e, e
    r_kp = radius * np.power(SCALE_FACTOR, octave.astype(float))
    du = np.abs(u[pidx, None] - uv[None, :, 0])
    dv = np.abs(v[pidx, None] - uv[None, :, 1])
    mask = (du < r_kp[None]) & (dv < r_kp[None])
    stereo = ~np.isnan(ur)
    if stereo.any():
        dur = np.abs(urp[pidx, None] - np.where(stereo, ur, 0.0)[None])
        mask &= ~stereo[None] | (dur < r_kp[None])
    if exclude_keypoints is not None:
        mask[:, np.asarray(exclude_keypoints, dtype=bool)] = False
    pi, ki = np.nonzero(mask)
    if len(pi) == 0:
        return e, e
    pts = pidx[pi]
    d = hamming_pairs(np.asarray(point_desc)[pts], descriptors[ki])
    g, o, dd = _best_per_group(pts, d, ki, max_dist, ratio)
    g, o, _ = _unique_targets(g, o, dd)
    order = np.argsort(g)
    return g[order], o[order]


def match_descriptors(desc_a, desc_b, max_dist: int = HAMMING_MAX, ratio: float = RATIO,
                      mask=None):
    """Brute-force matching a -> b with ratio test; unique in b.

    ``mask`` (len(a) x len(b) bool) restricts admissible pairs.
    """
    e = np.zeros(0, dtype=np.int64)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return e, e
    D = hamming_matrix(desc_a, desc_b)
    if mask is not None:
        D = np.where(mask, D, 10_000)
    rows = np.arange(len(D))
    best = np.argmin(D, axis=1)
    best_d = D[rows, best]
    if D.shape[1] > 1:
        second_d = np.partition(D, 1, axis=1)[:, 1]
    else:
        second_d = np.full(len(D), 10_000)
    keep = (best_d <= max_dist) & (best_d <= ratio * second_d)
    g, o, d = rows[keep], best[keep], best_d[keep]
    g, o, _ = _unique_targets(g, o, d)
    order = np.argsort(g)
    return g[order], o[order]
