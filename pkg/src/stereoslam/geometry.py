"""Rigid-body transforms, pinhole/stereo projection and triangulation.

Conventions used throughout the package:

* ``Pose`` is a rigid transform ``x_out = R @ x_in + t``.  Keyframe and frame
  poses are stored camera-to-world (``Twc``); the projection functions expect
  camera-frame points, i.e. ``Xc = Tcw @ Xw`` with ``Tcw = Twc.inverse()``.
* Twists are ordered ``(rotational, translational)``.  Optimizers perturb a
  world-to-camera pose on the left: ``Tcw <- exp(xi) @ Tcw``.
* Camera axes: x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALE_FACTOR = 1.2
PIXEL_SIGMA = 1.0
MIN_PARALLAX_DEG = 1.0


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


class LowParallaxError(ValueError):
    pass


class SingularRotationError(ValueError):
    pass


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def skew_batch(w):
    """Stack of skew matrices for an (N, 3) array."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(c))

    def normalized(self) -> "Pose":
        """Same pose with the rotation projected back onto SO(3)."""
        return Pose(orthonormalize(self.rotation), self.translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.array(self.rotational, dtype=float).reshape(3))
        object.__setattr__(self, "translational", np.array(self.translational, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotational, self.translational])


def _so3_coeffs(theta):
    """Returns (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation matrix (polar factor); works on (3, 3) or (N, 3, 3)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.ones(U.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _so3_coeffs(theta)
    W = skew(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    """Rotation vector of R.  Raises SingularRotationError at angle pi."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    c = (np.trace(R) - 1.0) / 2.0
    theta = float(np.arctan2(s, c))
    if np.pi - theta < 1e-8:
        raise SingularRotationError("rotation angle is pi; logarithm is not unique")
    if theta < 1e-4:
        return w * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 1e-3:
        return w * (theta / s)
    # Near pi the antisymmetric part loses precision; take the axis from the
    # symmetric part and its sign from w.
    S = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / np.sqrt(S[k, k])
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return axis * theta


def _left_jacobian_so3(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    _, b, c = _so3_coeffs(theta)
    W = skew(w)
    return np.eye(3) + b * W + c * (W @ W)


def _left_jacobian_so3_inv(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-4:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def se3_exp(xi) -> Pose:
    """Exponential map; accepts a Twist or a 6-vector (rotational first)."""
    v = xi.vector() if isinstance(xi, Twist) else np.asarray(xi, dtype=float)
    w, rho = v[:3], v[3:6]
    return Pose(so3_exp(w), _left_jacobian_so3(w) @ rho)


def se3_log(P: Pose) -> Twist:
    w = so3_log(P.rotation)
    return Twist(w, _left_jacobian_so3_inv(w) @ P.translation)


def adjoint(P: Pose) -> np.ndarray:
    """Adjoint of P acting on (rotational, translational) twists."""
    R, t = P.rotation, P.translation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(t) @ R
    return A


def ad_twist(xi) -> np.ndarray:
    """Lie bracket matrix ad(xi) for a (rotational, translational) 6-vector."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    A[:3, :3] = skew(xi[:3])
    A[3:, 3:] = skew(xi[:3])
    A[3:, :3] = skew(xi[3:])
    return A


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("fx, fy and baseline must be positive")

    @property
    def bf(self) -> float:
        return self.fx * self.baseline

    @property
    def close_depth(self) -> float:
        return 40.0 * self.baseline

    def in_image(self, u, v):
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True)
class MonoKeypoint:
    uL: float
    vL: float
    octave: int = 0

    def __post_init__(self):
        if self.octave < 0:
            raise ValueError("octave must be >= 0")


@dataclass(frozen=True)
class StereoKeypoint:
    uL: float
    vL: float
    uR: float
    octave: int = 0

    def __post_init__(self):
        if self.octave < 0:
            raise ValueError("octave must be >= 0")
        if not self.uR < self.uL:
            raise ValueError("stereo keypoint needs positive disparity (uR < uL)")

    @property
    def disparity(self) -> float:
        return self.uL - self.uR


def level_sigma2(octave, sigma: float = PIXEL_SIGMA, scale: float = SCALE_FACTOR):
    """Keypoint variance (pixels^2) at a pyramid level."""
    return sigma * sigma * np.power(scale, 2.0 * np.asarray(octave, dtype=float))


def project_mono(Xc, K: Intrinsics) -> np.ndarray:
    X, Y, Z = np.asarray(Xc, dtype=float)
    if Z <= 0:
        raise BehindCameraError(f"point depth {Z} is not in front of the camera")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy])


def project_stereo(Xc, K: Intrinsics) -> np.ndarray:
    X, Y, Z = np.asarray(Xc, dtype=float)
    if Z <= 0:
        raise BehindCameraError(f"point depth {Z} is not in front of the camera")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy,
                     K.fx * (X - K.baseline) / Z + K.cx])


def project_batch(Xc, K: Intrinsics) -> np.ndarray:
    """(N, 3) camera points -> (N, 3) stereo projections, no depth check."""
    Xc = np.asarray(Xc, dtype=float)
    inv_z = 1.0 / Xc[:, 2]
    u = K.fx * Xc[:, 0] * inv_z + K.cx
    v = K.fy * Xc[:, 1] * inv_z + K.cy
    return np.stack([u, v, u - K.bf * inv_z], axis=1)


def synth_right_coord(uL: float, depth: float, K: Intrinsics) -> float:
    """Virtual right-image coordinate of an RGB-D measurement."""
    if not depth > 0:
        raise InvalidDepthError(f"invalid depth {depth}")
    return uL - K.bf / depth


def backproject(kp, K: Intrinsics, Twc: Pose | None = None) -> np.ndarray:
    """3D point of a stereo keypoint, in camera frame or world frame if Twc given."""
    if isinstance(kp, StereoKeypoint):
        uL, vL, uR = kp.uL, kp.vL, kp.uR
    else:
        uL, vL, uR = kp
    disparity = uL - uR
    if not disparity > 0:
        raise InvalidDepthError("non-positive disparity")
    z = K.bf / disparity
    Xc = np.array([(uL - K.cx) * z / K.fx, (vL - K.cy) * z / K.fy, z])
    return Xc if Twc is None else Twc.apply(Xc)


def backproject_batch(uv, ur, K: Intrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    z = K.bf / (uv[:, 0] - np.asarray(ur, dtype=float))
    return np.stack([(uv[:, 0] - K.cx) * z / K.fx, (uv[:, 1] - K.cy) * z / K.fy, z], axis=1)


def projection_jacobian(Xc, K: Intrinsics, stereo: bool) -> np.ndarray:
    """d pi / d Xc, shape (2, 3) or (3, 3)."""
    X, Y, Z = np.asarray(Xc, dtype=float)
    iz = 1.0 / Z
    iz2 = iz * iz
    J = [[K.fx * iz, 0.0, -K.fx * X * iz2],
         [0.0, K.fy * iz, -K.fy * Y * iz2]]
    if stereo:
        J.append([K.fx * iz, 0.0, -K.fx * (X - K.baseline) * iz2])
    return np.array(J)


def reprojection_jacobians(Tcw: Pose, Xw, K: Intrinsics, stereo: bool):
    """Jacobians of pi(Tcw @ Xw) w.r.t. a left twist on Tcw and w.r.t. Xw."""
    Xc = Tcw.apply(Xw)
    Jp = projection_jacobian(Xc, K, stereo)
    dXc_dxi = np.hstack([-skew(Xc), np.eye(3)])
    return Jp @ dXc_dxi, Jp @ Tcw.rotation


def reprojection_jacobians_batch(R, Xc, K: Intrinsics):
    """Batched stereo projection Jacobians.

    ``R`` is (N, 3, 3) world-to-camera rotations, ``Xc`` (N, 3) camera-frame
    points.  Returns (J_pose (N, 3, 6), J_point (N, 3, 3)); the mono case uses
    the first two rows.
    """
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / Z
    iz2 = iz * iz
    n = len(Xc)
    Jp = np.zeros((n, 3, 3))
    Jp[:, 0, 0] = K.fx * iz
    Jp[:, 0, 2] = -K.fx * X * iz2
    Jp[:, 1, 1] = K.fy * iz
    Jp[:, 1, 2] = -K.fy * Y * iz2
    Jp[:, 2, 0] = K.fx * iz
    Jp[:, 2, 2] = -K.fx * (X - K.baseline) * iz2
    J_pose = np.empty((n, 3, 6))
    J_pose[:, :, :3] = -Jp @ skew_batch(Xc)
    J_pose[:, :, 3:] = Jp
    return J_pose, Jp @ R


def _bearing(kp, K: Intrinsics) -> np.ndarray:
    u, v = kp.uL, kp.vL
    return np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])


def parallax_deg(Xw, Twc_a: Pose, Twc_b: Pose) -> float:
    ra = np.asarray(Xw) - Twc_a.translation
    rb = np.asarray(Xw) - Twc_b.translation
    c = ra @ rb / (np.linalg.norm(ra) * np.linalg.norm(rb))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def triangulate(obs_a, pose_a: Pose, obs_b, pose_b: Pose, K: Intrinsics,
                min_parallax_deg: float = MIN_PARALLAX_DEG) -> np.ndarray:
    """Two-view DLT plus one Gauss-Newton refinement of reprojection error.

    Poses are camera-to-world.  Only the left-image coordinates of the
    observations are used.
    """
    da = pose_a.rotation @ _bearing(obs_a, K)
    db = pose_b.rotation @ _bearing(obs_b, K)
    cos_rays = da @ db / (np.linalg.norm(da) * np.linalg.norm(db))
    if cos_rays > np.cos(np.radians(min_parallax_deg)):
        raise LowParallaxError("ray parallax below threshold")

    Kmat = np.array([[K.fx, 0, K.cx], [0, K.fy, K.cy], [0, 0, 1.0]])
    rows = []
    views = []
    for obs, Twc in ((obs_a, pose_a), (obs_b, pose_b)):
        Tcw = Twc.inverse()
        P = Kmat @ np.hstack([Tcw.rotation, Tcw.translation[:, None]])
        rows.append(obs.uL * P[2] - P[0])
        rows.append(obs.vL * P[2] - P[1])
        views.append((Tcw, np.array([obs.uL, obs.vL])))
    _, _, Vt = np.linalg.svd(np.array(rows))
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        raise LowParallaxError("point at infinity")
    X = Xh[:3] / Xh[3]

    for Tcw, _ in views:
        if Tcw.apply(X)[2] <= 0:
            raise LowParallaxError("triangulated point behind a camera")

    H = np.zeros((3, 3))
    g = np.zeros(3)
    for Tcw, uv in views:
        Xc = Tcw.apply(X)
        r = uv - project_mono(Xc, K)
        J = projection_jacobian(Xc, K, stereo=False) @ Tcw.rotation
        H += J.T @ J
        g += J.T @ r
    try:
        X = X + np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        pass
    if parallax_deg(X, pose_a, pose_b) < min_parallax_deg:
        raise LowParallaxError("point parallax below threshold")
    return X


def triangulate_batch(uv_a, Twc_a: Pose, uv_b, Twc_b: Pose, K: Intrinsics,
                      min_parallax_deg: float = MIN_PARALLAX_DEG):
    """Vectorized two-view DLT for many correspondences between one view pair.

    Returns (points (N, 3) world, valid mask).  Invalid entries fail the
    ray-parallax test or land behind a camera.
    """
    uv_a = np.asarray(uv_a, dtype=float).reshape(-1, 2)
    uv_b = np.asarray(uv_b, dtype=float).reshape(-1, 2)
    n = len(uv_a)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)

    def rays(uv, Twc):
        d = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=1)
        d = d @ Twc.rotation.T
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    cos_rays = np.einsum("ij,ij->i", rays(uv_a, Twc_a), rays(uv_b, Twc_b))
    Kmat = np.array([[K.fx, 0, K.cx], [0, K.fy, K.cy], [0, 0, 1.0]])
    A = np.empty((n, 4, 4))
    for r, (uv, Twc) in enumerate(((uv_a, Twc_a), (uv_b, Twc_b))):
        Tcw = Twc.inverse()
        P = Kmat @ np.hstack([Tcw.rotation, Tcw.translation[:, None]])
        A[:, 2 * r] = uv[:, 0:1] * P[2] - P[0]
        A[:, 2 * r + 1] = uv[:, 1:2] * P[2] - P[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    w = Xh[:, 3]
    ok = np.abs(w) > 1e-12
    X = Xh[:, :3] / np.where(ok, w, 1.0)[:, None]
    ok &= cos_rays < np.cos(np.radians(min_parallax_deg))
    for Twc in (Twc_a, Twc_b):
        ok &= Twc.inverse().apply(X)[:, 2] > 0
    return X, ok
