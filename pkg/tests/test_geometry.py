import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_pose
from stereoslam.geometry import (BehindCameraError, InvalidDepthError, LowParallaxError,
                                 MonoKeypoint, Pose, SingularRotationError, StereoKeypoint,
                                 Twist, adjoint, backproject, backproject_batch, level_sigma2,
                                 orthonormalize, project_batch, project_mono, project_stereo,
                                 reprojection_jacobians, reprojection_jacobians_batch, se3_exp,
                                 se3_log, so3_exp, synth_right_coord, triangulate,
                                 triangulate_batch)

finite = st.floats(-3.0, 3.0, allow_nan=False)
twists = arrays(float, 6, elements=finite).filter(lambda x: np.linalg.norm(x[:3]) < 3.0)


def rodrigues(w):
    """Textbook Rodrigues formula, independent of the library's series."""
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * Kx + (1 - np.cos(th)) * Kx @ Kx


class TestSE3:
    def test_zero_twist_is_identity(self):
        assert se3_exp(np.zeros(6)).allclose(Pose.identity(), atol=0.0)

    def test_quarter_turn_about_z(self):
        P = se3_exp(Twist([0, 0, np.pi / 2], [0, 0, 0]))
        assert np.allclose(P.rotation @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_identity_log_is_zero(self):
        assert np.array_equal(se3_log(Pose.identity()).vector(), np.zeros(6))

    def test_round_trip_1000_twists(self, rng):
        for _ in range(1000):
            w = rng.normal(size=3)
            w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
            xi = np.concatenate([w, rng.normal(size=3) * 2])
            assert np.allclose(se3_log(se3_exp(xi)).vector(), xi, atol=1e-9)

    def test_rotation_matches_rodrigues(self, rng):
        for _ in range(100):
            w = rng.normal(size=3)
            assert np.allclose(so3_exp(w), rodrigues(w), atol=1e-12)

    def test_near_pi_log(self):
        th = np.pi - 1e-6
        P = Pose(rodrigues(np.array([0, 0, th])), np.zeros(3))
        assert np.allclose(se3_log(P).rotational, [0, 0, th], atol=1e-6)

    def test_exactly_pi_raises(self):
        with pytest.raises(SingularRotationError):
            se3_log(Pose(rodrigues(np.array([np.pi, 0, 0])), np.zeros(3)))

    @given(twists)
    def test_exp_log_property(self, xi):
        assert np.allclose(se3_log(se3_exp(xi)).vector(), xi, atol=1e-8)

    def test_translation_uses_left_jacobian(self):
        # pure translation is untouched; rotation about z bends it
        assert np.allclose(se3_exp([0, 0, 0, 1, 2, 3]).translation, [1, 2, 3])
        P = se3_exp([0, 0, np.pi / 2, 1, 0, 0])
        # closed form for w = (0,0,pi/2), v = (1,0,0): V v = (sin/t, (1-cos)/t, 0)
        t = np.pi / 2
        assert np.allclose(P.translation, [np.sin(t) / t, (1 - np.cos(t)) / t, 0], atol=1e-12)

    def test_adjoint_moves_twists(self, rng):
        P = random_pose(rng)
        xi = rng.normal(size=6) * 0.1
        lhs = (P @ se3_exp(xi) @ P.inverse()).matrix()
        rhs = se3_exp(adjoint(P) @ xi).matrix()
        assert np.allclose(lhs, rhs, atol=1e-10)


class TestPose:
    @given(twists, twists)
    def test_inverse_of_compose(self, a, b):
        P, Q = se3_exp(a), se3_exp(b)
        assert (P @ Q).inverse().allclose(Q.inverse() @ P.inverse(), atol=1e-9)

    @given(twists)
    def test_compose_with_inverse(self, a):
        P = se3_exp(a)
        assert (P @ P.inverse()).allclose(Pose.identity(), atol=1e-9)
        R = P.rotation
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1) < 1e-9

    def test_apply_matches_matrix(self, rng):
        P = random_pose(rng)
        X = rng.normal(size=(5, 3))
        Xh = np.hstack([X, np.ones((5, 1))]) @ P.matrix().T
        assert np.allclose(P.apply(X), Xh[:, :3])

    def test_orthonormalize_repairs_drift(self, rng):
        R = so3_exp(rng.normal(size=3)) + 1e-6 * rng.normal(size=(3, 3))
        Q = orthonormalize(R)
        assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-14)
        assert np.linalg.det(Q) > 0
        assert np.abs(Q - R).max() < 1e-5
        stack = orthonormalize(np.stack([R, R]))
        assert np.allclose(stack[1], Q)


class TestProjection:
    def test_mono_examples(self, K):
        assert np.allclose(project_mono([0, 0, 2], K), [320, 240])
        assert np.allclose(project_mono([1, 0, 2], K), [570, 240])
        assert np.allclose(project_mono([0, -1, 2], K), [320, -10])

    def test_stereo_examples(self, K):
        assert np.allclose(project_stereo([1, 0, 2], K), [570, 240, 445])
        assert project_stereo([0, 0, 2], K)[2] == pytest.approx(195)

    def test_behind_camera(self, K):
        with pytest.raises(BehindCameraError):
            project_mono([0, 0, -1], K)
        with pytest.raises(BehindCameraError):
            project_stereo([0, 0, 0], K)

    @given(arrays(float, 3, elements=st.floats(-20, 20)), st.floats(0.1, 80))
    def test_disparity_identity(self, xy, z):
        from stereoslam.geometry import Intrinsics
        K = Intrinsics(500.0, 480.0, 320.0, 240.0, 0.5)
        p = project_stereo([xy[0], xy[1], z], K)
        assert p[0] - p[2] == pytest.approx(K.fx * K.baseline / z, rel=1e-12, abs=1e-9)

    def test_batch_matches_scalar(self, K, rng):
        X = rng.uniform([-5, -5, 1], [5, 5, 30], size=(20, 3))
        assert np.allclose(project_batch(X, K), [project_stereo(x, K) for x in X])

    def test_rgbd_virtual_right_coordinate(self):
        from stereoslam.geometry import Intrinsics
        K = Intrinsics(500.0, 500.0, 320.0, 240.0, 0.08)
        assert synth_right_coord(100.0, 2.0, K) == pytest.approx(80.0)
        assert synth_right_coord(100.0, 1e12, K) == pytest.approx(100.0)
        with pytest.raises(InvalidDepthError):
            synth_right_coord(100.0, 0.0, K)

    def test_virtual_right_agrees_with_stereo_projection(self, K, rng):
        for _ in range(50):
            u, v, z = rng.uniform(0, 640), rng.uniform(0, 480), rng.uniform(0.3, 40)
            Xc = [(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z]
            assert synth_right_coord(u, z, K) == pytest.approx(project_stereo(Xc, K)[2], abs=1e-9)

    def test_keypoint_invariants(self):
        with pytest.raises(ValueError):
            StereoKeypoint(10, 10, 12)
        with pytest.raises(ValueError):
            MonoKeypoint(1, 1, -1)
        assert StereoKeypoint(10, 10, 4).disparity == 6

    def test_level_sigma2(self):
        assert level_sigma2(0) == 1.0
        assert level_sigma2(3) == pytest.approx(1.2 ** 6)


def central_difference(f, x, h):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        d = np.zeros_like(x)
        d[i] = h
        cols.append((f(x + d) - f(x - d)) / (2 * h))
    return np.stack(cols, axis=1)


class TestJacobians:
    @pytest.mark.parametrize("stereo", [False, True])
    def test_against_finite_differences(self, K, rng, stereo):
        n = 3 if stereo else 2
        for _ in range(200):
            Tcw = random_pose(rng, 0.3, 0.5)
            Xc = rng.uniform([-4, -3, 2], [4, 3, 30])
            Xw = Tcw.inverse().apply(Xc)
            Jxi, Jx = reprojection_jacobians(Tcw, Xw, K, stereo)
            fp = lambda xi: project_stereo((se3_exp(xi) @ Tcw).apply(Xw), K)[:n]
            fx = lambda X: project_stereo(Tcw.apply(X), K)[:n]
            for J, num in ((Jxi, central_difference(fp, np.zeros(6), 1e-6)),
                           (Jx, central_difference(fx, Xw, 1e-5))):
                assert np.linalg.norm(J - num) / np.linalg.norm(num) < 1e-5

    def test_batch_matches_single(self, K, rng):
        Ts = [random_pose(rng, 0.3) for _ in range(10)]
        Xc = rng.uniform([-4, -3, 2], [4, 3, 30], size=(10, 3))
        Jp, Jx = reprojection_jacobians_batch(np.array([T.rotation for T in Ts]), Xc, K)
        for i, T in enumerate(Ts):
            a, b = reprojection_jacobians(T, T.inverse().apply(Xc[i]), K, True)
            assert np.allclose(Jp[i], a) and np.allclose(Jx[i], b)


class TestTriangulation:
    def test_two_views_noise_free(self, K, rng):
        for _ in range(20):
            Pa = random_pose(rng, 0.05, 0.2)
            Pb = Pa @ se3_exp(np.r_[rng.normal(size=3) * 0.02, 0.5, 0, 0])
            X = Pa.apply([rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(4, 12)])
            ka = MonoKeypoint(*project_mono(Pa.inverse().apply(X), K))
            kb = MonoKeypoint(*project_mono(Pb.inverse().apply(X), K))
            try:
                Y = triangulate(ka, Pa, kb, Pb, K)
            except LowParallaxError:
                continue
            assert np.linalg.norm(Y - X) < 1e-6

    def test_identical_poses_rejected(self, K):
        P = Pose.identity()
        kp = MonoKeypoint(300, 200)
        with pytest.raises(LowParallaxError):
            triangulate(kp, P, kp, P, K)

    def test_stereo_backprojection_matches_two_view(self, K):
        # left and right cameras of one stereo frame as two views
        X = np.array([0.7, -0.4, 5.0])
        uL, vL, uR = project_stereo(X, K)
        left = Pose.identity()
        right = Pose(np.eye(3), [K.baseline, 0, 0])
        Y = triangulate(MonoKeypoint(uL, vL), left, MonoKeypoint(uR, vL), right, K)
        Z = backproject(StereoKeypoint(uL, vL, uR), K)
        assert np.linalg.norm(Y - Z) < 1e-6
        assert np.allclose(Z, X, atol=1e-9)

    def test_backproject_batch(self, K, rng):
        X = rng.uniform([-4, -3, 2], [4, 3, 30], size=(10, 3))
        p = project_batch(X, K)
        assert np.allclose(backproject_batch(p[:, :2], p[:, 2], K), X)
        with pytest.raises(InvalidDepthError):
            backproject((100.0, 100.0, 100.0), K)

    def test_batch_agrees_and_flags_degenerate(self, K, rng):
        Pa = Pose.identity()
        Pb = Pose(np.eye(3), [1.0, 0, 0])
        X = rng.uniform([-3, -2, 4], [3, 2, 15], size=(30, 3))
        ua = project_batch(X, K)[:, :2]
        ub = project_batch(Pb.inverse().apply(X), K)[:, :2]
        Y, ok = triangulate_batch(ua, Pa, ub, Pb, K)
        assert np.allclose(Y[ok], X[ok], atol=1e-6)
        assert ok.mean() > 0.8
        _, ok_same = triangulate_batch(ua, Pa, ua, Pa, K)
        assert not ok_same.any()
