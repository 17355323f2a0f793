"""Trajectory accuracy metrics: absolute translation RMSE and KITTI relative errors."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Pose
from .trajectory import Trajectory

ASSOCIATION_TOLERANCE = 0.02
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class AssociationError(ValueError):
    pass


class TrajectoryTooShortError(ValueError):
    pass


@dataclass
class MetricReport:
    t_abs: float
    t_rel: float | None
    r_rel: float | None
    pairs: int

    def as_dict(self):
        return asdict(self)


def associate(stamps_a, stamps_b, max_difference: float = ASSOCIATION_TOLERANCE):
    """Greedy one-to-one timestamp matching, closest pairs first.

    Returns index arrays (ia, ib) sorted by ``stamps_a``.
    """
    a = np.asarray(stamps_a, dtype=float)
    b = np.asarray(stamps_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(b)
    bs = b[order]
    cand = []
    for i, t in enumerate(a):
        k = np.searchsorted(bs, t)
        for j in (k - 1, k, k + 1):
            if 0 <= j < len(bs):
                d = abs(t - bs[j])
                if d < max_difference:
                    cand.append((d, i, int(order[j])))
    cand.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    if not pairs:
        return np.zeros(0, int), np.zeros(0, int)
    ia, ib = map(np.array, zip(*pairs))
    return ia, ib


def align_rigid(src, dst) -> Pose:
    """Least-squares rigid transform T (no scale) with dst ~ T @ src."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    W = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


def _associated(estimate: Trajectory, truth: Trajectory, tolerance: float):
    ia, ib = associate(estimate.stamps, truth.stamps, tolerance)
    if len(ia) == 0:
        raise AssociationError("no associable timestamp pairs")
    return estimate.subset(ia), truth.subset(ib)


def ate_rmse(estimate: Trajectory, truth: Trajectory, align: bool = True,
             tolerance: float = ASSOCIATION_TOLERANCE) -> float:
    est, gt = _associated(estimate, truth, tolerance)
    p_est, p_gt = est.positions, gt.positions
    if align:
        p_est = align_rigid(p_est, p_gt).apply(p_est)
    err = np.linalg.norm(p_est - p_gt, axis=1)
    return float(np.sqrt(np.mean(err ** 2)))


def _rotation_angle(R) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def kitti_rel_errors(estimate: Trajectory, truth: Trajectory, lengths=KITTI_LENGTHS,
                     step: int = 1, tolerance: float = ASSOCIATION_TOLERANCE):
    """Average relative (t_rel %, r_rel deg/100 m) over fixed path-length segments.

    Segments start at every ``step``-th associated pose; the segment end is the
    first pose whose ground-truth path distance exceeds the start by the length.
    """
    est, gt = _associated(estimate, truth, tolerance)
    E, G = est.matrices, gt.matrices
    steps = np.linalg.norm(np.diff(G[:, :3, 3], axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    t_errs, r_errs = [], []
    for first in range(0, len(G), step):
        for length in lengths:
            last = int(np.searchsorted(dist, dist[first] + length, side="right"))
            if last >= len(G):
                continue
            dg = np.linalg.inv(G[first]) @ G[last]
            de = np.linalg.inv(E[first]) @ E[last]
            err = np.linalg.inv(de) @ dg
            t_errs.append(np.linalg.norm(err[:3, 3]) / length)
            r_errs.append(_rotation_angle(err[:3, :3]) / length)
    if not t_errs:
        raise TrajectoryTooShortError(
            f"path length {dist[-1]:.1f} m is shorter than all segment lengths")
    t_rel = 100.0 * float(np.mean(t_errs))
    r_rel = 100.0 * float(np.degrees(np.mean(r_errs)))
    return t_rel, r_rel


def evaluate(estimate: Trajectory, truth: Trajectory, align: bool = True) -> MetricReport:
    t_abs = ate_rmse(estimate, truth, align=align)
    try:
        t_rel, r_rel = kitti_rel_errors(estimate, truth)
    except TrajectoryTooShortError:
        t_rel = r_rel = None
    n = len(associate(estimate.stamps, truth.stamps)[0])
    return MetricReport(t_abs=t_abs, t_rel=t_rel, r_rel=r_rel, pairs=n)
