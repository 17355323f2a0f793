"""Reprojection-error bundle adjustment: motion-only, local and full.

Poses inside a problem are world-to-camera (Tcw) and are updated by a left
twist; the public functions take and return camera-to-world poses.  The
damped normal equations are solved by eliminating the points first
(block-diagonal 3x3 inverses) and factoring the reduced camera system with
Cholesky.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ..geometry import (Intrinsics, Pose, level_sigma2, orthonormalize, project_batch,
                        reprojection_jacobians_batch, se3_exp)
from .lm import Aborted, LMConfig, OptimizationDiverged, lm_iterations, run_lm
from .robust import CHI2_MONO, CHI2_MONO_GROSS, CHI2_STEREO, CHI2_STEREO_GROSS, huber_cost, huber_weight

MIN_DEPTH = 1e-3
INVALID_R2 = 1e8


class InsufficientMatches(ValueError):
    pass


@dataclass
class BundleSystem:
    U: np.ndarray        # (nP, 6, 6) pose blocks
    V: np.ndarray        # (nX, 3, 3) point blocks
    W: np.ndarray        # (nW, 6, 3) pose-point coupling blocks
    w_pose: np.ndarray   # (nW,) variable pose index of each block
    w_point: np.ndarray  # (nW,) variable point index of each block
    bp: np.ndarray       # (nP, 6)
    bx: np.ndarray       # (nX, 3)

    def max_diagonal(self) -> float:
        d = [0.0]
        if len(self.U):
            d.append(np.max(np.diagonal(self.U, axis1=1, axis2=2)))
        if len(self.V):
            d.append(np.max(np.diagonal(self.V, axis1=1, axis2=2)))
        return float(max(d))

    def gradient_norm(self) -> float:
        g = [0.0]
        if self.bp.size:
            g.append(np.max(np.abs(self.bp)))
        if self.bx.size:
            g.append(np.max(np.abs(self.bx)))
        return float(max(g))

    def coupling(self) -> sp.csr_matrix:
        nP, nX = len(self.U), len(self.V)
        a = np.arange(6)[:, None]
        c = np.arange(3)[None, :]
        rows = (6 * self.w_pose[:, None, None] + a[None]).repeat(3, axis=2)
        cols = (3 * self.w_point[:, None, None] + c[None]).repeat(6, axis=1)
        return sp.csr_matrix((self.W.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(6 * nP, 3 * nX))

    def dense(self, damping: float = 0.0):
        """Full damped normal matrix and right-hand side (poses first)."""
        nP, nX = len(self.U), len(self.V)
        n = 6 * nP + 3 * nX
        H = np.zeros((n, n))
        for i in range(nP):
            H[6 * i:6 * i + 6, 6 * i:6 * i + 6] = self.U[i]
        off = 6 * nP
        for j in range(nX):
            H[off + 3 * j:off + 3 * j + 3, off + 3 * j:off + 3 * j + 3] = self.V[j]
        W = self.coupling().toarray()
        H[:6 * nP, off:] = W
        H[off:, :6 * nP] = W.T
        H[np.diag_indices(n)] += damping
        return H, np.concatenate([self.bp.ravel(), self.bx.ravel()])


def segment_sum(index, values, n: int) -> np.ndarray:
    """Sum rows of ``values`` (m, ...) into ``n`` buckets given by ``index``."""
    values = np.asarray(values, dtype=float)
    m = len(values)
    width = int(np.prod(values.shape[1:], dtype=np.int64))
    flat = values.reshape(m, width)
    ind = sp.csr_matrix((np.ones(m), (np.asarray(index), np.arange(m))), shape=(n, m))
    return np.asarray(ind @ flat).reshape((n,) + values.shape[1:])


def _same_point_pairs(w_point):
    """All ordered pairs (k, l) of coupling blocks that share a point."""
    order = np.argsort(w_point, kind="stable")
    pts = w_point[order]
    counts = np.bincount(pts)
    starts = np.cumsum(counts) - counts
    rep = counts[pts]
    left = np.repeat(order, rep)
    first = np.cumsum(rep) - rep
    offs = np.arange(rep.sum()) - np.repeat(first, rep)
    right = order[np.repeat(starts[pts], rep) + offs]
    return left, right


def solve_schur(system: BundleSystem, damping: float):
    """Damped step via point elimination; returns (d_pose (nP,6), d_point (nX,3))."""
    nP, nX = len(system.U), len(system.V)
    Vd = system.V + damping * np.eye(3)
    Vinv = np.linalg.inv(Vd) if nX else np.zeros((0, 3, 3))
    if nP == 0:
        dx = (Vinv @ system.bx[..., None])[..., 0]
        return np.zeros((0, 6)), dx
    S = np.zeros((6 * nP, 6 * nP))
    for i in range(nP):
        S[6 * i:6 * i + 6, 6 * i:6 * i + 6] = system.U[i]
    S[np.diag_indices(6 * nP)] += damping
    rhs = system.bp.copy()
    W, wp, wx = system.W, system.w_pose, system.w_point
    if nX and len(W):
        Y = W @ Vinv[wx]
        left, right = _same_point_pairs(wx)
        blocks = Y[left] @ W[right].transpose(0, 2, 1)
        S_blocks = segment_sum(wp[left] * nP + wp[right], blocks, nP * nP)
        S -= S_blocks.reshape(nP, nP, 6, 6).transpose(0, 2, 1, 3).reshape(6 * nP, 6 * nP)
        rhs -= segment_sum(wp, (Y @ system.bx[wx][..., None])[..., 0], nP)
    rhs = rhs.ravel()
    try:
        dp = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S), rhs)
    except np.linalg.LinAlgError:
        dp = np.linalg.lstsq(S, rhs, rcond=None)[0]
    if nX:
        back = system.bx
        if len(W):
            dp6 = dp.reshape(nP, 6)
            back = back - segment_sum(wx, (W.transpose(0, 2, 1) @ dp6[wp][..., None])[..., 0], nX)
        dx = (Vinv @ back[..., None])[..., 0]
    else:
        dx = np.zeros((0, 3))
    return dp.reshape(nP, 6), dx


def solve_dense(system: BundleSystem, damping: float):
    """Reference solve of the full damped normal equations."""
    nP = len(system.U)
    H, b = system.dense(damping)
    d = np.linalg.solve(H, b)
    return d[:6 * nP].reshape(nP, 6), d[6 * nP:].reshape(-1, 3)


@dataclass
class BundleState:
    R: np.ndarray  # (P, 3, 3) world-to-camera
    t: np.ndarray  # (P, 3)
    X: np.ndarray  # (M, 3)

    def copy(self) -> "BundleState":
        return BundleState(self.R.copy(), self.t.copy(), self.X.copy())


class BundleProblem:
    """Reprojection least squares over a set of poses, points and observations.

    Observation measurements are (uL, vL, uR) rows with uR = NaN for
    monocular keypoints.
    """

    def __init__(self, K: Intrinsics, Twc, points, pose_index, point_index, meas, octave,
                 fixed_poses=(), fixed_points=None, robust: bool = True,
                 kf_ids=None, point_ids=None):
        self.K = K
        Twc = list(Twc)
        Tcw = [T.inverse() for T in Twc]
        R = orthonormalize(np.array([T.rotation for T in Tcw]).reshape(-1, 3, 3))
        t = np.array([T.translation for T in Tcw]).reshape(-1, 3)
        self.initial = BundleState(R, t, np.array(points, dtype=float).reshape(-1, 3))
        self.pose_index = np.asarray(pose_index, dtype=np.int64)
        self.point_index = np.asarray(point_index, dtype=np.int64)
        meas = np.asarray(meas, dtype=float).reshape(-1, 3)
        self.stereo = ~np.isnan(meas[:, 2])
        self.meas = np.where(np.isnan(meas), 0.0, meas)
        self.info = 1.0 / level_sigma2(np.asarray(octave))
        self.chi2 = np.where(self.stereo, CHI2_STEREO, CHI2_MONO)
        self.delta = np.sqrt(self.chi2)
        self.active = np.ones(len(self.meas), dtype=bool)
        self.robust = robust
        self.kf_ids = list(kf_ids) if kf_ids is not None else list(range(len(Twc)))
        self.point_ids = list(point_ids) if point_ids is not None else list(range(len(self.initial.X)))
        n_pose, n_pts = len(R), len(self.initial.X)
        self.pose_fixed = np.zeros(n_pose, dtype=bool)
        self.pose_fixed[list(fixed_poses)] = True
        self.point_fixed = np.zeros(n_pts, dtype=bool) if fixed_points is None else \
            np.asarray(fixed_points, dtype=bool).copy()
        self.refresh_variables()

    def refresh_variables(self):
        """Recompute variable indices; points without enough active support are dropped."""
        n_pose, n_pts = len(self.pose_fixed), len(self.point_fixed)
        act = self.active
        n_act = np.bincount(self.point_index[act], minlength=n_pts)
        n_stereo = np.bincount(self.point_index[act & self.stereo], minlength=n_pts)
        self.point_dropped = ~self.point_fixed & (n_act < 2) & (n_stereo < 1)
        self.pose_var = np.full(n_pose, -1, dtype=np.int64)
        free = ~self.pose_fixed
        self.pose_var[free] = np.arange(free.sum())
        self.point_var = np.full(n_pts, -1, dtype=np.int64)
        freep = ~self.point_fixed & ~self.point_dropped
        self.point_var[freep] = np.arange(freep.sum())
        self.used = act & ~self.point_dropped[self.point_index]

    # ------------------------------------------------------------ evaluation
    def _residuals(self, s: BundleState, mask):
        pi, pj = self.pose_index[mask], self.point_index[mask]
        Xc = (s.R[pi] @ s.X[pj][..., None])[..., 0] + s.t[pi]
        valid = Xc[:, 2] > MIN_DEPTH
        Xc_safe = np.where(valid[:, None], Xc, np.array([0.0, 0.0, 1.0]))
        e = self.meas[mask] - project_batch(Xc_safe, self.K)
        e[~self.stereo[mask], 2] = 0.0
        r2 = self.info[mask] * np.einsum("oi,oi->o", e, e)
        r2 = np.where(valid, r2, INVALID_R2)
        return Xc_safe, e, r2, valid

    def chi2_values(self, s: BundleState | None = None) -> np.ndarray:
        s = self.initial if s is None else s
        return self._residuals(s, np.ones(len(self.meas), dtype=bool))[2]

    def cost(self, s: BundleState) -> float:
        r2 = self._residuals(s, self.used)[2]
        if self.robust:
            return float(np.sum(huber_cost(r2, self.delta[self.used])))
        return float(np.sum(r2))

    def linearize(self, s: BundleState) -> BundleSystem:
        m = self.used
        Xc, e, r2, valid = self._residuals(s, m)
        pi, pj = self.pose_index[m], self.point_index[m]
        Jc, Jx = reprojection_jacobians_batch(s.R[pi], Xc, self.K)
        mono = ~self.stereo[m]
        Jc[mono, 2, :] = 0.0
        Jx[mono, 2, :] = 0.0
        w = self.info[m] * (huber_weight(r2, self.delta[m]) if self.robust else 1.0)
        w = np.where(valid, w, 0.0)
        pv, xv = self.pose_var[pi], self.point_var[pj]
        nP = int((self.pose_var >= 0).sum())
        nX = int((self.point_var >= 0).sum())
        wJc = Jc * w[:, None, None]
        wJx = Jx * w[:, None, None]
        hp = pv >= 0
        hx = xv >= 0
        U = segment_sum(pv[hp], wJc[hp].transpose(0, 2, 1) @ Jc[hp], nP)
        bp = segment_sum(pv[hp], (wJc[hp].transpose(0, 2, 1) @ e[hp][..., None])[..., 0], nP)
        V = segment_sum(xv[hx], wJx[hx].transpose(0, 2, 1) @ Jx[hx], nX)
        bx = segment_sum(xv[hx], (wJx[hx].transpose(0, 2, 1) @ e[hx][..., None])[..., 0], nX)
        both = hp & hx
        Wb = wJc[both].transpose(0, 2, 1) @ Jx[both]
        return BundleSystem(U, V, Wb, pv[both], xv[both], bp, bx)

    def solve(self, system: BundleSystem, damping: float):
        return solve_schur(system, damping)

    def predicted_reduction(self, system: BundleSystem, step, damping: float) -> float:
        dp, dx = step
        return float(dp.ravel() @ system.bp.ravel() + dx.ravel() @ system.bx.ravel()
                     + damping * (dp.ravel() @ dp.ravel() + dx.ravel() @ dx.ravel()))

    def retract(self, s: BundleState, step) -> BundleState:
        dp, dx = step
        out = s.copy()
        for i in np.flatnonzero(self.pose_var >= 0):
            E = se3_exp(dp[self.pose_var[i]])
            out.R[i] = E.rotation @ s.R[i]
            out.t[i] = E.rotation @ s.t[i] + E.translation
        sel = self.point_var >= 0
        out.X[sel] = s.X[sel] + dx[self.point_var[sel]]
        return out

    # --------------------------------------------------------------- results
    def poses_wc(self, s: BundleState) -> list[Pose]:
        return [Pose(R, t).inverse() for R, t in zip(s.R, s.t)]

    def classify_outliers(self, s: BundleState, gross: bool = False) -> np.ndarray:
        """Residuals above the 95% cutoff, or the 99.9% one with ``gross``."""
        if gross:
            return self.chi2_values(s) > np.where(self.stereo, CHI2_STEREO_GROSS, CHI2_MONO_GROSS)
        return self.chi2_values(s) > self.chi2


@dataclass
class BAResult:
    poses: dict          # kf id -> optimized camera-to-world Pose
    points: dict         # point id -> optimized position
    outliers: list = field(default_factory=list)  # (point id, kf id)
    cost: float = 0.0
    initial_cost: float = 0.0
    log: list = field(default_factory=list)
    before_poses: dict = field(default_factory=dict)


@dataclass
class _PoseSystem:
    H: np.ndarray
    b: np.ndarray

    def max_diagonal(self) -> float:
        return float(np.max(np.diag(self.H)))

    def gradient_norm(self) -> float:
        return float(np.max(np.abs(self.b)))


class PoseOnlyProblem:
    """Single world-to-camera pose against fixed points; same LM interface as BundleProblem."""

    def __init__(self, K: Intrinsics, points, meas, octave, robust: bool = True):
        self.K = K
        self.X = np.asarray(points, dtype=float).reshape(-1, 3)
        meas = np.asarray(meas, dtype=float).reshape(-1, 3)
        self.stereo = ~np.isnan(meas[:, 2])
        self.meas = np.where(np.isnan(meas), 0.0, meas)
        self.info = 1.0 / level_sigma2(np.asarray(octave))
        self.chi2 = np.where(self.stereo, CHI2_STEREO, CHI2_MONO)
        self.delta = np.sqrt(self.chi2)
        self.robust = robust
        self.used = np.ones(len(self.X), dtype=bool)

    def _residuals(self, T: Pose, m):
        Xc = self.X[m] @ T.rotation.T + T.translation
        valid = Xc[:, 2] > MIN_DEPTH
        Xc = np.where(valid[:, None], Xc, np.array([0.0, 0.0, 1.0]))
        e = self.meas[m] - project_batch(Xc, self.K)
        e[~self.stereo[m], 2] = 0.0
        r2 = np.where(valid, self.info[m] * np.einsum("oi,oi->o", e, e), INVALID_R2)
        return Xc, e, r2, valid

    def chi2_values(self, T: Pose) -> np.ndarray:
        return self._residuals(T, slice(None))[2]

    def cost(self, T: Pose) -> float:
        r2 = self._residuals(T, self.used)[2]
        if self.robust:
            return float(np.sum(huber_cost(r2, self.delta[self.used])))
        return float(np.sum(r2))

    def linearize(self, T: Pose) -> _PoseSystem:
        m = self.used
        Xc, e, r2, valid = self._residuals(T, m)
        J = reprojection_jacobians_batch(np.broadcast_to(T.rotation, (len(Xc), 3, 3)), Xc, self.K)[0]
        J[~self.stereo[m], 2, :] = 0.0
        w = self.info[m] * (huber_weight(r2, self.delta[m]) if self.robust else 1.0)
        wJ = J * np.where(valid, w, 0.0)[:, None, None]
        return _PoseSystem(wJ.reshape(-1, 6).T @ J.reshape(-1, 6), wJ.reshape(-1, 6).T @ e.ravel())

    def solve(self, system: _PoseSystem, damping: float):
        H = system.H + damping * np.eye(6)
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), system.b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(H, system.b, rcond=None)[0]

    def retract(self, T: Pose, step) -> Pose:
        return se3_exp(step) @ T

    def predicted_reduction(self, system: _PoseSystem, step, damping: float) -> float:
        return float(step @ system.b + damping * (step @ step))


def motion_only_ba(meas, octave, points, initial: Pose, K: Intrinsics,
                   config: LMConfig | None = None, rounds: int = 4, robust_rounds: int = 2,
                   log=None):
    """Refine a single camera-to-world pose against fixed 3D points.

    Returns (pose, inlier mask).  After every round the matches are
    re-classified by the chi-square cutoff and only inliers enter the next.
    """
    config = config or LMConfig(max_iterations=10, relative_tolerance=1e-6, gradient_tolerance=1e-8)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < 6:
        raise InsufficientMatches(f"{n} matches, need at least 6")
    prob = PoseOnlyProblem(K, points, meas, octave)
    state = initial.inverse().normalized()
    inliers = np.ones(n, dtype=bool)
    for r in range(rounds):
        prob.robust = r < robust_rounds
        prob.used = inliers
        if inliers.sum() < 3:
            break
        res = run_lm(prob, state, config, log=log)
        state = res.state
        inliers = prob.chi2_values(state) <= prob.chi2
    if not np.all(np.isfinite(state.translation)):
        raise OptimizationDiverged("motion-only BA produced a non-finite pose")
    return state.inverse(), inliers


def problem_from_map(wm, variable_kfs, fixed_kfs, point_ids, robust=True) -> BundleProblem:
    """Build a problem over map keyframes (camera-to-world poses) and points."""
    kf_ids = sorted(variable_kfs) + sorted(set(fixed_kfs) - set(variable_kfs))
    kf_pos = {k: i for i, k in enumerate(kf_ids)}
    pids = sorted(point_ids)
    pt_pos = {p: j for j, p in enumerate(pids)}
    pose_index, point_index, meas, octave = [], [], [], []
    for p in pids:
        mp = wm.points[p]
        for k, idx in sorted(mp.observations.items()):
            if k not in kf_pos:
                continue
            kf = wm.keyframes[k]
            pose_index.append(kf_pos[k])
            point_index.append(pt_pos[p])
            meas.append((kf.uv[idx, 0], kf.uv[idx, 1], kf.ur[idx]))
            octave.append(kf.octave[idx])
    fixed = [kf_pos[k] for k in kf_ids if k in fixed_kfs or k == wm.origin_id]
    return BundleProblem(wm.K, [wm.keyframes[k].pose for k in kf_ids],
                         np.array([wm.points[p].position for p in pids]).reshape(-1, 3),
                         pose_index, point_index, np.array(meas).reshape(-1, 3), octave,
                         fixed_poses=fixed, robust=robust, kf_ids=kf_ids, point_ids=pids)


def _result(prob: BundleProblem, state: BundleState, outliers, log, cost, initial_cost) -> BAResult:
    poses = prob.poses_wc(state)
    before = prob.poses_wc(prob.initial)
    out_poses = {k: poses[i] for i, k in enumerate(prob.kf_ids) if not prob.pose_fixed[i]}
    out_before = {k: before[i] for i, k in enumerate(prob.kf_ids)}
    out_points = {p: state.X[j].copy() for j, p in enumerate(prob.point_ids)
                  if prob.point_var[j] >= 0}
    return BAResult(out_poses, out_points, outliers, cost, initial_cost, log, out_before)


def optimize_bundle(prob: BundleProblem, config: LMConfig, outlier_pass: bool = True,
                    first_iterations: int = 5, log=None) -> BAResult:
    """Local-BA style schedule: robust pass, drop chi-square outliers, refine.

    The returned ``outliers`` are only the gross ones left after refinement.
    """
    log = [] if log is None else log
    state = prob.initial
    initial_cost = prob.cost(state)
    if not outlier_pass:
        res = run_lm(prob, state, config, log=log)
        return _result(prob, res.state, [], log, res.cost, initial_cost)
    first = LMConfig(max_iterations=first_iterations, initial_damping=config.initial_damping,
                     gradient_tolerance=config.gradient_tolerance,
                     relative_tolerance=config.relative_tolerance,
                     max_rejections=config.max_rejections)
    res = run_lm(prob, state, first, log=log)
    state = res.state
    out = prob.classify_outliers(state) & prob.active
    prob.active = prob.active & ~out
    prob.refresh_variables()
    res = run_lm(prob, state, config, log=log)
    state = res.state
    out = prob.classify_outliers(state, gross=True)
    outliers = [(prob.point_ids[prob.point_index[o]], prob.kf_ids[prob.pose_index[o]])
                for o in np.flatnonzero(out)]
    return _result(prob, state, outliers, log, res.cost, initial_cost)


def local_ba(wm, K_L, K_F, P_L, config: LMConfig | None = None, log=None) -> BAResult:
    """Optimize K_L poses and P_L points; K_F (and the origin) stay fixed."""
    config = config or LMConfig(max_iterations=10)
    prob = problem_from_map(wm, K_L, K_F, P_L)
    return optimize_bundle(prob, config, log=log)


def snapshot_problem(wm) -> BundleProblem:
    """Full-BA problem over every keyframe and point; only the origin is fixed."""
    return problem_from_map(wm, set(wm.keyframes), (), set(wm.points))


def full_ba_steps(prob: BundleProblem, config: LMConfig, abort=None, log=None):
    """Generator running full BA one LM iteration per step; returns BAResult.

    Raises Aborted at the first iteration boundary after ``abort`` is set.
    """
    log = [] if log is None else log
    initial_cost = prob.cost(prob.initial)
    if not (prob.pose_var >= 0).any() and not (prob.point_var >= 0).any():
        if abort is not None and abort.is_set():
            raise Aborted()
        return _result(prob, prob.initial, [], log, initial_cost, initial_cost)
    res = yield from lm_iterations(prob, prob.initial, config, abort=abort, log=log)
    return _result(prob, res.state, [], log, res.cost, initial_cost)


def full_ba(prob: BundleProblem, config: LMConfig | None = None, abort=None, log=None) -> BAResult:
    config = config or LMConfig(max_iterations=10)
    gen = full_ba_steps(prob, config, abort=abort, log=log)
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value
