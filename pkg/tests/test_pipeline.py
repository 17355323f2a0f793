import threading
import time

import numpy as np
import pytest

from scenes import make_scene, perturb_pose, scene_map, truth_map
from stereoslam.frame import DESCRIPTOR_BYTES, Frame
from stereoslam.geometry import Pose, project_batch, project_stereo, se3_exp
from stereoslam.metrics import ate_rmse
from stereoslam.optim import LMConfig, full_ba, snapshot_problem
from stereoslam.pipeline import (BootstrapFailed, FullBAController, LocalMapper, Mode, Status,
                                 System, SystemConfig, bootstrap, close_loop, merge_full_ba,
                                 validate_loop)
from stereoslam.place_recognition import build_vocabulary
from stereoslam.sim import WorldConfig, generate_sequence
from stereoslam.worldmap import Provenance, WorldMap, insert_keyframe

K = make_scene(np.random.default_rng(0), n_kf=1, n_pts=1).K


def synthetic_frame(rng, index, n_close=0, n_far=0, n_mono=0):
    depth = np.r_[rng.uniform(2, 15, n_close), rng.uniform(25, 40, n_far), rng.uniform(2, 40, n_mono)]
    n = len(depth)
    Xc = np.column_stack([rng.uniform(-0.4, 0.4, n) * depth, rng.uniform(-0.3, 0.3, n) * depth, depth])
    p = project_batch(Xc, K)
    ur = p[:, 2].copy()
    ur[n_close + n_far:] = np.nan
    desc = rng.integers(0, 256, (n, DESCRIPTOR_BYTES), dtype=np.uint8)
    return Frame(index, 0.1 * index, p[:, :2], ur, np.zeros(n, int), desc), Xc


class TestBootstrap:
    def test_counts_and_round_trip(self, rng):
        frame, Xc = synthetic_frame(rng, 0, n_close=60, n_far=40, n_mono=50)
        wm = WorldMap(K)
        kf = bootstrap(frame, wm)
        assert len(wm.keyframes) == 1 and len(wm.points) == 100
        assert kf.pose.allclose(Pose.identity(), atol=0)
        for i in np.flatnonzero(kf.map_points >= 0):
            X = wm.points[int(kf.map_points[i])].position
            assert np.allclose(project_stereo(X, K), [*frame.uv[i], frame.ur[i]], atol=1e-9)
        assert (kf.map_points[100:] < 0).all()
        wm.check_invariants()

    def test_needs_stereo(self, rng):
        frame, _ = synthetic_frame(rng, 0, n_mono=30)
        with pytest.raises(BootstrapFailed):
            bootstrap(frame, WorldMap(K))


class TestLocalMapping:
    def test_close_points_created_far_singletons_not(self, rng):
        wm = WorldMap(K)
        bootstrap(synthetic_frame(rng, 0, n_close=30)[0], wm)
        frame, _ = synthetic_frame(rng, 1, n_close=80, n_far=20)
        mapper = LocalMapper(wm, SystemConfig(), None, None)
        summary = mapper.step(frame, Pose(np.eye(3), [0.2, 0, 0.5]), np.full(len(frame), -1))
        assert summary["close_points"] == 80 and summary["triangulated"] == 0
        kf = wm.keyframes[summary["kf_id"]]
        provs = [wm.points[p].provenance for p in kf.point_ids()]
        assert provs.count(Provenance.CLOSE) == 80 and len(provs) == 80
        wm.check_invariants()

    def test_invariants_after_real_steps(self):
        seq = generate_sequence(WorldConfig(n_frames=40, pixel_sigma=1.0, p_bit=0.02))
        s = System(seq.K, None, SystemConfig(loop_closing=False))
        s.run(seq.frames)
        s.wm.check_invariants()
        assert len(s.wm.keyframes) >= 3


class TestTracking:
    def test_static_camera(self, rng):
        frame, _ = synthetic_frame(rng, 0, n_close=150)
        frames = [Frame(i, 0.1 * i, frame.uv, frame.ur, frame.octave, frame.descriptors) for i in range(4)]
        s = System(K, None)
        results = [s.process(f) for f in frames]
        s.finish()
        for r in results[1:]:
            assert r.status == Status.OK
            assert r.pose.allclose(Pose.identity(), atol=1e-6)

    @pytest.fixture(scope="class")
    @classmethod
    def line_run(cls):
        seq = generate_sequence(WorldConfig(trajectory="line", n_frames=40, length=40.0))
        s = System(seq.K, None, SystemConfig(loop_closing=False))
        res = [s.process(f) for f in seq.frames]
        s.finish()
        return seq, s, res

    def test_noise_free_constant_velocity(self, line_run):
        seq, s, res = line_run
        assert all(r.status == Status.OK for r in res)
        for r, T in zip(res, seq.truth.poses):
            assert np.linalg.norm(r.pose.translation - T.translation) < 1e-5

    def test_unmapped_frame_is_lost(self, line_run):
        _, s, _ = line_run
        elsewhere = generate_sequence(WorldConfig(trajectory="line", n_frames=2, seed=77))
        f = elsewhere.frames[0]
        digest = s.wm.digest()
        r = s.tracker.track(Frame(1000, 100.0, f.uv, f.ur, f.octave, f.descriptors))
        assert r.status == Status.LOST
        assert s.wm.digest() == digest


class TestLocalization:
    def test_empty_map_is_always_lost(self):
        seq = generate_sequence(WorldConfig(n_frames=5))
        s = System(seq.K, None, mode=Mode.LOCALIZATION)
        assert all(s.process(f).status == Status.LOST for f in seq.frames)
        assert not s.wm.keyframes

    def test_replay_keeps_map_bytes(self):
        seq = generate_sequence(WorldConfig(trajectory="line", n_frames=40, pixel_sigma=0.5))
        vocab = build_vocabulary([f.descriptors for f in seq.frames[::5]])
        mapper = System(seq.K, vocab, SystemConfig(loop_closing=False))
        mapper.run(seq.frames)
        before = mapper.wm.to_bytes()
        loc = System(seq.K, vocab, mode=Mode.LOCALIZATION, wm=WorldMap.from_dict(mapper.wm.to_dict()))
        loc.run(seq.frames)
        assert loc.wm.to_bytes() == before
        assert all(r.status == "ok" for r in loc.records)
        assert ate_rmse(loc.frame_trajectory(), seq.truth) < 2 * ate_rmse(mapper.frame_trajectory(), seq.truth) + 1e-3


class TestMerge:
    def test_unchanged_map_equals_snapshot(self, rng):
        wm = scene_map(make_scene(rng, sigma=0.5), rng, 0.01, 0.05, 0.05)
        res = full_ba(snapshot_problem(wm), LMConfig(max_iterations=5))
        merge_full_ba(wm, res)
        for k, T in res.poses.items():
            assert np.array_equal(wm.keyframes[k].pose.matrix(), T.matrix())
        for p, X in res.points.items():
            assert np.array_equal(wm.points[p].position, X)

    def test_keyframe_inserted_during_ba(self, rng):
        scene = make_scene(rng, n_kf=4, sigma=0.5)
        wm = scene_map(scene, rng, 0.01, 0.05, 0.05)
        res = full_ba(snapshot_problem(wm), LMConfig(max_iterations=10))
        # a child and grandchild of keyframe 3 arrive while BA runs
        parent = 3
        old_parent = wm.keyframes[parent].pose
        f = wm.keyframes[parent].as_frame()
        child = insert_keyframe(wm, f, old_parent @ se3_exp([0, 0.05, 0, 0.3, 0, 0.4]))
        wm.set_parent(child.id, parent)
        grand = insert_keyframe(wm, f, child.pose @ se3_exp([0, -0.02, 0, 0.1, 0, 0.5]))
        wm.set_parent(grand.id, child.id)
        pid = wm.create_point([1.0, 2.0, 9.0], np.zeros(DESCRIPTOR_BYTES), Provenance.CLOSE, child.id).id
        wm.add_observation(pid, child.id, 0)
        old_child, old_grand = child.pose, grand.pose
        summary = merge_full_ba(wm, res)
        T = res.poses[parent] @ old_parent.inverse()
        assert summary["propagated"] == 2
        assert np.abs((T @ old_child).matrix() - wm.keyframes[child.id].pose.matrix()).max() < 1e-9
        rel_before = old_child.inverse() @ old_grand
        rel_after = wm.keyframes[child.id].pose.inverse() @ wm.keyframes[grand.id].pose
        assert np.abs(rel_before.matrix() - rel_after.matrix()).max() < 1e-9
        assert np.allclose(wm.points[pid].position, T.apply([1.0, 2.0, 9.0]), atol=1e-9)
        wm.check_invariants()


def slow_map(rng):
    """Big enough that one LM iteration takes measurable time."""
    return scene_map(make_scene(rng, n_kf=12, n_pts=400, sigma=1.0), rng, 0.02, 0.1, 0.2)


class TestAbort:
    def test_step_mode(self, rng):
        wm = slow_map(rng)
        ctl = FullBAController(wm, LMConfig(max_iterations=20), threaded=False)
        ctl.launch(loop_kf=1)
        ctl.step(2)
        n = len(ctl.log)
        ctl.launch(loop_kf=2)   # aborts the first run
        assert ctl.aborts == 1 and len(ctl.log) <= n + 1
        ctl.wait()
        assert [e[0] for e in ctl.events] == ["launch", "aborted", "launch", "merged"]
        assert ctl.merges == 1

    def test_threaded_mode(self, rng):
        wm = slow_map(rng)
        ctl = FullBAController(wm, LMConfig(max_iterations=200, relative_tolerance=1e-300,
                                            gradient_tolerance=1e-300), threaded=True)
        digest = wm.digest()
        ctl.launch(loop_kf=1)
        deadline = time.time() + 30
        while not ctl.log and time.time() < deadline:
            time.sleep(0.01)
        n = len(ctl.log)
        ctl.abort()
        assert not ctl.running and ctl.aborts == 1
        assert len(ctl.log) <= n + 1
        assert wm.digest() == digest
        ctl.config = LMConfig(max_iterations=5)
        ctl.launch(loop_kf=2)
        ctl.wait()
        assert [e[0] for e in ctl.events] == ["launch", "aborted", "launch", "merged"]
        assert wm.digest() != digest


@pytest.fixture(scope="module")
def drifted_loop():
    """Ground-truth map of 1.05 laps whose second half accumulates 2 degrees of yaw drift."""
    seq = generate_sequence(WorldConfig(n_frames=210, laps=1.05))
    vocab = build_vocabulary([f.descriptors for f in seq.frames[::10]])
    frames = list(range(0, 209, 8))
    split = 104
    wm = truth_map(seq, frames, split_frame=split, vocab=vocab)
    pivot = seq.truth.poses[split].translation
    drift = {}
    for k, f in enumerate(frames):
        a = np.radians(2.0) * max(f - split, 0) / (frames[-1] - split)
        D = Pose(se3_exp([0, a, 0, 0, 0, 0]).rotation, np.zeros(3))
        drift[k] = Pose(np.eye(3), pivot) @ D @ Pose(np.eye(3), -pivot)
        wm.keyframes[k].pose = drift[k] @ wm.keyframes[k].pose
    for mp in wm.points.values():
        mp.position = drift[mp.reference_kf].apply(mp.position)
    return seq, wm, frames


class TestLoopClosing:
    def test_pose_graph_then_full_ba(self, drifted_loop):
        seq, wm, frames = drifted_loop
        truth = {k: seq.truth.poses[f] for k, f in enumerate(frames)}
        cur = len(frames) - 1
        err = lambda: np.linalg.norm(wm.keyframes[cur].pose.translation - truth[cur].translation)
        before = err()
        assert before > 0.5
        cfg = SystemConfig()
        event = validate_loop(wm, cur, 0, cfg)
        assert event is not None and event.inliers >= cfg.loop_min_matches
        n_points = len(wm.points)
        ctl = FullBAController(wm, LMConfig(max_iterations=40))
        close_loop(wm, event, ctl, cfg)
        wm.check_invariants()
        assert len(wm.points) < n_points
        assert 0 in wm.keyframes[cur].loop_edges
        assert err() * 5 <= before
        assert ctl.launches == 1 and ctl.running
        ctl.wait()
        assert ctl.merges == 1
        for k, T in truth.items():
            E = T.inverse() @ wm.keyframes[k].pose
            assert np.linalg.norm(E.translation) < 1e-4
            assert np.degrees(E.angle()) < 0.01

    def test_loop_while_ba_running_relaunches_once(self, drifted_loop, rng):
        seq, wm, frames = drifted_loop
        wm = scene_map(make_scene(rng, sigma=0.5), rng, 0.01, 0.05, 0.05)
        ctl = FullBAController(wm, LMConfig(max_iterations=20))
        ctl.launch()
        ctl.step(1)
        from stereoslam.pipeline import LoopEvent
        ev = LoopEvent(4, 0, wm.keyframes[0].pose.inverse() @ wm.keyframes[4].pose, 50,
                       wm.keyframes[4].pose, [])
        close_loop(wm, ev, ctl, SystemConfig())
        assert ctl.aborts == 1 and ctl.launches == 2
        ctl.wait()
        assert ctl.merges == 1
