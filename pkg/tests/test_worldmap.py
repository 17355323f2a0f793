import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereoslam.frame import DESCRIPTOR_BYTES, Frame
from stereoslam.geometry import Intrinsics, Pose
from stereoslam.worldmap import (KeyframePolicy, Provenance, WorldMap, classify_point,
                                 cull_keyframes, cull_map_points, insert_keyframe, local_window,
                                 need_new_keyframe)


def blank_frame(index, n=200, octave=0):
    uv = np.column_stack([np.linspace(10, 600, n), np.full(n, 100.0)])
    return Frame(index, index * 0.1, uv, uv[:, 0] - 20.0, np.full(n, octave),
                 np.zeros((n, DESCRIPTOR_BYTES), dtype=np.uint8))


def new_points(wm, count, kf_id, provenance=Provenance.FAR):
    return [wm.create_point(np.zeros(3), np.zeros(DESCRIPTOR_BYTES), provenance, kf_id).id
            for _ in range(count)]


def link(wm, kf_id, pids, start=0):
    for j, pid in enumerate(pids):
        wm.add_observation(pid, kf_id, start + j)


def links_for(n, pids):
    mp = np.full(n, -1)
    mp[:len(pids)] = pids
    return mp


@pytest.fixture
def wm():
    return WorldMap(Intrinsics(500.0, 500.0, 320.0, 240.0, 0.5))


class TestClassify:
    def test_kitti_baseline(self):
        K = Intrinsics(718.0, 718.0, 607.0, 185.0, 0.54)
        assert classify_point(21.0, K) == Provenance.CLOSE
        assert classify_point(21.6, K) == Provenance.FAR

    def test_rgbd_baseline(self):
        K = Intrinsics(525.0, 525.0, 320.0, 240.0, 0.08)
        assert classify_point(3.0, K) == Provenance.CLOSE
        assert classify_point(3.3, K) == Provenance.FAR

    def test_nonpositive_depth(self, K):
        with pytest.raises(ValueError):
            classify_point(0.0, K)

    @given(st.floats(0.01, 1.0), st.floats(1e-3, 200.0))
    def test_monotone_in_depth(self, b, d):
        K = Intrinsics(500.0, 500.0, 320.0, 240.0, b)
        expected = Provenance.CLOSE if d < 40 * b else Provenance.FAR
        assert classify_point(d, K) == expected


class TestKeyframePolicy:
    def test_examples(self):
        assert need_new_keyframe(90, 80, 1)
        assert not need_new_keyframe(100, 200, 1)
        assert not need_new_keyframe(90, 50, 1)

    def test_thresholds_pinned(self):
        p = KeyframePolicy()
        assert (p.tau_t, p.tau_c) == (100, 70)
        assert need_new_keyframe(99, 70, 0)
        assert not need_new_keyframe(99, 69, 0)
        assert not need_new_keyframe(100, 70, 0)

    def test_spacing_rule(self):
        assert need_new_keyframe(500, 0, 21, tracked_matches=50)
        assert not need_new_keyframe(500, 0, 20, tracked_matches=50)
        assert not need_new_keyframe(500, 0, 21, tracked_matches=49)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            KeyframePolicy(tau_t=70, tau_c=70)
        with pytest.raises(ValueError):
            KeyframePolicy(tau_t=10, tau_c=0)

    @given(st.integers(0, 300), st.integers(0, 300))
    def test_close_rule_exhaustive(self, t, c):
        assert need_new_keyframe(t, c, 0) == (t < 100 and c >= 70)


class TestInsertion:
    def test_first_keyframe_is_root(self, wm):
        kf = insert_keyframe(wm, blank_frame(0), Pose.identity())
        assert kf.parent is None and wm.origin_id == kf.id
        assert wm.covisibility_edges() == {}
        wm.check_invariants()

    def test_parent_is_strongest_neighbor(self, wm):
        a = insert_keyframe(wm, blank_frame(0), Pose.identity())
        b = insert_keyframe(wm, blank_frame(1), Pose.identity())
        pa = new_points(wm, 50, a.id)
        pb = new_points(wm, 10, b.id)
        link(wm, a.id, pa)
        link(wm, b.id, pb)
        c = insert_keyframe(wm, blank_frame(2), Pose.identity(), links_for(200, pa + pb))
        edges = wm.covisibility_edges()
        assert edges == {(a.id, c.id): 50}
        assert wm.shared_count(b.id, c.id) == 10
        assert c.parent == a.id
        wm.check_invariants()

    def test_incremental_matches_brute_force(self, wm, rng):
        pool = []
        for i in range(8):
            chosen = [p for p in pool if rng.random() < 0.4]
            kf = insert_keyframe(wm, blank_frame(i), Pose.identity(), links_for(200, chosen))
            fresh = new_points(wm, 30, kf.id)
            link(wm, kf.id, fresh, start=len(chosen))
            pool += fresh
            wm.check_invariants()
        inc = {(a, b): w for a, row in wm.shared.items() for b, w in row.items() if a < b}
        assert inc == wm.brute_force_weights()


def overlapping_map(wm, n_kf=5, n_pts=40, octaves=None):
    """Every keyframe observes the same points; returns the keyframe ids."""
    ids = [insert_keyframe(wm, blank_frame(i, octave=0 if octaves is None else octaves[i]),
                           Pose.identity()).id for i in range(n_kf)]
    pids = new_points(wm, n_pts, ids[0])
    for k in ids:
        link(wm, k, pids)
    return ids


class TestCulling:
    def test_lone_keyframe_kept(self, wm):
        kf = insert_keyframe(wm, blank_frame(0), Pose.identity())
        link(wm, kf.id, new_points(wm, 10, kf.id))
        assert cull_keyframes(wm) == []

    def test_redundant_keyframe_culled(self, wm):
        ids = overlapping_map(wm, 4)
        removed = cull_keyframes(wm, candidates=[ids[2]])
        assert removed == [ids[2]]
        wm.check_invariants()

    def test_coarser_observers_do_not_count(self, wm):
        # keyframe 1 at octave 0; the others only see the points at octave 2
        ids = overlapping_map(wm, 4, octaves=[2, 0, 2, 2])
        assert cull_keyframes(wm, candidates=[ids[1]]) == []

    def test_root_and_protected_never_culled(self, wm):
        ids = overlapping_map(wm, 5)
        removed = cull_keyframes(wm, protected=[ids[4]])
        assert ids[0] not in removed and ids[4] not in removed
        wm.check_invariants()

    def test_culling_keeps_tree_connected(self, wm, rng):
        pool = []
        for i in range(12):
            chosen = [p for p in pool if rng.random() < 0.7]
            kf = insert_keyframe(wm, blank_frame(i, n=400), Pose.identity(), links_for(400, chosen))
            fresh = new_points(wm, 20, kf.id)
            link(wm, kf.id, fresh, start=len(chosen))
            pool += fresh
        removed = cull_keyframes(wm, redundancy=0.5)
        assert removed
        wm.check_invariants()
        n_edges = sum(kf.parent is not None for kf in wm.keyframes.values())
        assert n_edges == len(wm.keyframes) - 1

    def test_culled_pose_recoverable(self, wm):
        ids = overlapping_map(wm, 4)
        T = Pose(np.eye(3), [1.0, 2.0, 3.0])
        wm.keyframes[ids[2]].pose = T
        cull_keyframes(wm, candidates=[ids[2]])
        anc, rel = wm.resolve_pose(ids[2])
        assert (wm.keyframes[anc].pose @ rel).allclose(T, atol=1e-12)

    def test_point_culling(self, wm):
        ids = overlapping_map(wm, 5)
        far = new_points(wm, 1, ids[4])[0]
        close = new_points(wm, 1, ids[4], Provenance.CLOSE)[0]
        link(wm, ids[4], [far, close], start=100)
        wm.add_observation(close, ids[3], 150)
        # too young to judge
        assert cull_map_points(wm) == []
        for i in range(3):
            insert_keyframe(wm, blank_frame(10 + i), Pose.identity())
        removed = cull_map_points(wm)
        assert far in removed and close not in removed
        assert far not in wm.points
        assert all(p not in removed for p in wm.keyframes[ids[0]].point_ids())
        wm.check_invariants()


class TestLocalWindow:
    def test_single_keyframe(self, wm):
        kf = insert_keyframe(wm, blank_frame(0), Pose.identity())
        link(wm, kf.id, new_points(wm, 5, kf.id))
        K_L, K_F, P_L = local_window(wm, kf.id)
        assert K_L == {kf.id} and K_F == set() and len(P_L) == 5

    def test_chain(self, wm):
        ids = [insert_keyframe(wm, blank_frame(i), Pose.identity()).id for i in range(3)]
        p01 = new_points(wm, 20, ids[0])
        p12 = new_points(wm, 20, ids[1])
        link(wm, ids[0], p01)
        link(wm, ids[1], p01)
        link(wm, ids[1], p12, start=20)
        link(wm, ids[2], p12)
        K_L, K_F, P_L = local_window(wm, ids[1])
        assert K_L == set(ids) and K_F == set()
        assert P_L == set(p01 + p12)
        # at an end of the chain the far neighbor is outside the window but sees P_L
        K_L, K_F, _ = local_window(wm, ids[0])
        assert K_L == {ids[0], ids[1]} and K_F == {ids[2]}

    def test_weak_link_goes_to_frontier(self, wm):
        a, b = (insert_keyframe(wm, blank_frame(i), Pose.identity()).id for i in range(2))
        shared = new_points(wm, 3, a)
        link(wm, a, shared)
        link(wm, b, shared)
        K_L, K_F, P_L = local_window(wm, a)
        assert K_L == {a} and K_F == {b}
        assert not (K_L & K_F)


class TestSerialization:
    def test_round_trip_and_digest(self, wm, tmp_path):
        ids = overlapping_map(wm, 3)
        wm.add_loop_edge(ids[0], ids[2])
        path = tmp_path / "map.json"
        wm.save(path)
        back = WorldMap.load(path)
        back.check_invariants()
        assert back.digest() == wm.digest()
        assert back.covisibility_edges() == wm.covisibility_edges()
        assert back.keyframes[ids[2]].loop_edges == {ids[0]}

    def test_digest_tracks_changes(self, wm):
        overlapping_map(wm, 2)
        before = wm.digest()
        wm.points[0].position = np.array([0.0, 0.0, 1e-9])
        assert wm.digest() != before


@settings(max_examples=25)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 30)), min_size=1, max_size=40))
def test_random_edit_sequences_keep_invariants(ops):
    wm = WorldMap(Intrinsics(500.0, 500.0, 320.0, 240.0, 0.5), theta_cov=3)
    rng = np.random.default_rng(len(ops))
    kf0 = insert_keyframe(wm, blank_frame(0, n=300), Pose.identity())
    link(wm, kf0.id, new_points(wm, 10, kf0.id))
    for op, arg in ops:
        kfs = sorted(wm.keyframes)
        if op == 0:
            pts = [p for p in wm.points if rng.random() < 0.5][:100]
            kf = insert_keyframe(wm, blank_frame(len(kfs), n=300), Pose.identity(),
                                 links_for(300, pts))
            link(wm, kf.id, new_points(wm, arg % 8, kf.id), start=len(pts))
        elif op == 1 and wm.points:
            wm.erase_point(sorted(wm.points)[arg % len(wm.points)])
        elif op == 2:
            cull_keyframes(wm, redundancy=0.5, min_observers=1)
        elif op == 3 and len(wm.points) >= 2:
            a, b = sorted(wm.points)[:2]
            wm.replace_point(a, b)
        wm.check_invariants()
