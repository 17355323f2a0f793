import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_pose
from oracles import ate_reference, horn_alignment, kitti_reference
from scenes import drift_line, hand_built_pair
from stereoslam.geometry import Pose, se3_exp
from stereoslam.metrics import (AssociationError, TrajectoryTooShortError, align_rigid,
                                associate, ate_rmse, evaluate, kitti_rel_errors)
from stereoslam.trajectory import Trajectory


class TestAssociation:
    def test_within_tolerance(self):
        ia, ib = associate([0.0, 1.0, 2.0], [0.005, 1.019, 2.5])
        assert ia.tolist() == [0, 1] and ib.tolist() == [0, 1]

    def test_one_to_one_closest_first(self):
        ia, ib = associate([1.0, 1.01], [1.009])
        assert ia.tolist() == [1] and ib.tolist() == [0]

    def test_no_pairs_raises(self):
        a = Trajectory.from_poses([0.0], [Pose.identity()])
        b = Trajectory.from_poses([5.0], [Pose.identity()])
        with pytest.raises(AssociationError):
            ate_rmse(a, b)


class TestATE:
    def test_identity(self, rng):
        est, gt = hand_built_pair(rng)
        assert ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-9)

    def test_offset_examples(self, rng):
        _, gt = hand_built_pair(rng)
        shifted = gt.transformed(Pose(np.eye(3), [1.0, 0, 0]))
        assert ate_rmse(shifted, gt, align=True) == pytest.approx(0.0, abs=1e-9)
        assert ate_rmse(shifted, gt, align=False) == pytest.approx(1.0, abs=1e-12)

    def test_alignment_matches_horn(self, rng):
        for _ in range(20):
            src = rng.normal(size=(10, 3)) * 5
            R, t = horn_alignment(src, src @ random_pose(rng).rotation.T + 3)
            T = align_rigid(src, src @ np.asarray(R).T + t)
            assert np.allclose(T.rotation, R, atol=1e-9) and np.allclose(T.translation, t, atol=1e-9)

    def test_alignment_has_no_scale(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        T = align_rigid(src, 2 * src)
        assert np.allclose(T.rotation, np.eye(3))

    @pytest.mark.parametrize("align", [True, False])
    def test_matches_reference(self, rng, align):
        for _ in range(10):
            est, gt = hand_built_pair(rng)
            ref = ate_reference(est.positions, gt.positions, align)
            assert abs(ate_rmse(est, gt, align=align) - ref) < 1e-9

    @given(st.integers(0, 2 ** 32 - 1))
    def test_invariant_under_common_transform(self, seed):
        rng = np.random.default_rng(seed)
        est, gt = hand_built_pair(rng)
        T = random_pose(rng, 1.0, 50.0)
        a = ate_rmse(est, gt)
        assert ate_rmse(est.transformed(T), gt.transformed(T)) == pytest.approx(a, abs=1e-7)


class TestKitti:
    def test_identity(self):
        _, gt = drift_line()
        assert kitti_rel_errors(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_global_offset(self):
        _, gt = drift_line()
        t_rel, r_rel = kitti_rel_errors(gt.transformed(Pose(np.eye(3), [5, -2, 1])), gt)
        assert t_rel == pytest.approx(0.0, abs=1e-9) and r_rel == pytest.approx(0.0, abs=1e-9)

    def test_one_percent_drift(self):
        est, gt = drift_line()
        t_rel, r_rel = kitti_rel_errors(est, gt)
        assert abs(t_rel - 1.0) < 0.05
        assert r_rel == pytest.approx(0.0, abs=1e-9)

    def test_drift_matches_reference(self):
        est, gt = drift_line(n=10, spacing=45.0)
        ref = kitti_reference(est.matrices, gt.matrices)
        assert np.allclose(kitti_rel_errors(est, gt), ref, rtol=0, atol=1e-9)

    def test_matches_reference(self, rng):
        for _ in range(10):
            est, gt = hand_built_pair(rng)
            ref = kitti_reference(est.matrices, gt.matrices)
            assert np.allclose(kitti_rel_errors(est, gt), ref, rtol=0, atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_invariant_under_global_transform(self, seed):
        rng = np.random.default_rng(seed)
        est, gt = hand_built_pair(rng)
        base = kitti_rel_errors(est, gt)
        moved = kitti_rel_errors(est.transformed(random_pose(rng, 1.0, 100.0)), gt)
        assert np.allclose(moved, base, atol=1e-7)

    def test_too_short(self):
        est, gt = drift_line(n=50)
        with pytest.raises(TrajectoryTooShortError):
            kitti_rel_errors(est, gt)

    def test_short_path_uses_defined_lengths(self):
        est, gt = drift_line(n=160)
        t_rel, _ = kitti_rel_errors(est, gt)
        assert abs(t_rel - 1.0) < 0.05


def test_evaluate_report(rng):
    est, gt = hand_built_pair(rng)
    rep = evaluate(est, gt)
    assert rep.pairs == 10 and rep.t_abs >= 0 and rep.t_rel >= 0 and rep.r_rel >= 0
    short = evaluate(*drift_line(n=20))
    assert short.t_rel is None and short.r_rel is None
