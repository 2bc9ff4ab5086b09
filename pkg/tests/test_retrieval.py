from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from lumenloc.geometry import Pose
from lumenloc.retrieval import (
    PoseDescriptorModel,
    VirtualDatabase,
    best_subrange,
    build_virtual_buffer,
    hit_scores,
    nearest,
    normalize,
    retrieve,
)
from lumenloc.simulator import centerline_poses, generate_lumen, generate_trajectory


def brute_subrange(scores, R):
    best_k, best = 0, None
    for k in range(len(scores) - R):
        s = sum(int(x) for x in scores[k : k + R + 1])
        if best is None or s > best:
            best_k, best = k, s
    return best_k, best


def brute_nearest(desc, q):
    best, best_j = None, None
    for j, d in enumerate(desc):
        dist = float(np.sum((d - q) ** 2))
        if best is None or dist < best:
            best, best_j = dist, j
    return best_j


def make_db(rng, K=40, D=16, ids=None):
    desc = normalize(rng.normal(size=(K, D)))
    ids = np.arange(K) if ids is None else np.asarray(ids)
    return VirtualDatabase(ids, desc, [Pose.identity()] * K)


class TestNearest:
    def test_exact_match(self, rng):
        db = make_db(rng)
        assert nearest(db, db.descriptors[7]) == 7

    def test_tie_goes_to_smallest_id(self):
        desc = np.zeros((12, 4))
        desc[:, 3] = 1.0
        a, b = 0.6, 0.8
        desc[3] = [a, b, 0, 0]
        desc[9] = [a, -b, 0, 0]
        db = VirtualDatabase(np.arange(12), desc, [Pose.identity()] * 12)
        assert nearest(db, np.array([1.0, 0.0, 0.0, 0.0])) == 3

    def test_matches_linear_scan(self, rng):
        db = make_db(rng, K=200, D=32)
        for _ in range(1000):
            q = normalize(rng.normal(size=32))
            assert nearest(db, q) == brute_nearest(db.descriptors, q)

    def test_non_contiguous_ids(self, rng):
        db = make_db(rng, K=5, ids=[10, 20, 30, 40, 50])
        assert nearest(db, db.descriptors[2]) == 30

    def test_empty_rejected(self):
        db = VirtualDatabase(np.zeros(0, int), np.zeros((0, 8)), [])
        with pytest.raises(ValueError):
            nearest(db, np.ones(8) / np.sqrt(8))


class TestDatabase:
    def test_ids_strictly_increasing(self, rng):
        with pytest.raises(ValueError):
            make_db(rng, K=3, ids=[0, 2, 2])

    def test_unit_norm_required(self):
        with pytest.raises(ValueError):
            VirtualDatabase(np.arange(2), np.ones((2, 3)), [Pose.identity()] * 2)

    def test_save_load_exact(self, rng, tmp_path):
        desc = normalize(rng.normal(size=(30, 16))).astype(np.float32).astype(np.float64)
        poses = [random_pose(rng) for _ in range(30)]
        db = VirtualDatabase(np.arange(30) * 3, desc, poses)
        db.save(tmp_path / "vdb")
        back = VirtualDatabase.load(tmp_path / "vdb")
        assert np.array_equal(back.ids, db.ids)
        assert np.array_equal(back.descriptors, db.descriptors)
        for a, b in zip(back.poses, db.poses):
            assert np.array_equal(a.translation, b.translation)
            assert np.allclose(a.rotation, b.rotation, atol=1e-15)


class TestHitScores:
    def test_concentration(self, rng):
        db = make_db(rng)
        q = np.tile(db.descriptors[0], (9, 1))
        s = hit_scores(db, q)
        assert s[0] == 9 and s.sum() == 9

    def test_empty_queries(self, rng):
        db = make_db(rng)
        assert not hit_scores(db, np.zeros((0, 16))).any()

    def test_counting_oracle(self, rng):
        db = make_db(rng, K=50)
        qs = normalize(rng.normal(size=(300, 16)))
        s = hit_scores(db, qs)
        expected = np.zeros(50, int)
        for q in qs:
            expected[nearest(db, q)] += 1
        assert np.array_equal(s, expected) and s.sum() == 300

    def test_query_order_invariant(self, rng):
        db = make_db(rng)
        qs = normalize(rng.normal(size=(100, 16)))
        assert np.array_equal(hit_scores(db, qs), hit_scores(db, qs[rng.permutation(100)]))


class TestBestSubrange:
    def test_hand_countable(self):
        assert best_subrange([0, 5, 5, 0, 0], 1) == (1, 10)

    def test_tie_leftmost(self):
        assert best_subrange([3] * 10, 2) == (0, 9)

    def test_full_range(self):
        assert best_subrange([1, 2, 3], 2) == (0, 6)

    @pytest.mark.parametrize("R", [3, 4, -1])
    def test_invalid_R(self, R):
        with pytest.raises(ValueError):
            best_subrange([1, 2, 3], R)

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.data())
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force(self, scores, data):
        R = data.draw(st.integers(0, len(scores) - 1))
        assert best_subrange(scores, R) == brute_subrange(scores, R)

    def test_not_invariant_to_database_order(self):
        s = [0, 0, 4, 4, 0, 0, 1, 0]
        assert best_subrange(s, 1) == (2, 8)
        assert best_subrange(s[::-1], 1) == (4, 8)


class TestRetrieve:
    def test_invariants(self, rng):
        db = make_db(rng, K=60)
        qs = normalize(rng.normal(size=(25, 16)))
        res = retrieve(db, qs, R=10)
        assert res.hit_scores.sum() == 25
        k = res.start_position
        assert res.range_score == res.hit_scores[k : k + 11].sum()
        assert len(res.indices) == 25

    def test_full_database_buffer(self, rng):
        db = make_db(rng, K=12)
        buf = build_virtual_buffer(db, normalize(rng.normal(size=(5, 16))), R=11)
        assert [i for i, _, _ in buf] == list(range(12))

    def test_single_query(self, rng):
        db = make_db(rng, K=30)
        res = retrieve(db, db.descriptors[20][None], R=5)
        assert res.range_start == 15  # leftmost window that contains entry 20

    def test_simulator_segment(self):
        rng = np.random.default_rng(3)
        lumen = generate_lumen(rng)
        path = (1, 0)
        model = PoseDescriptorModel(seed=5)
        vposes = centerline_poses(lumen, path, 2.0)
        vdesc = np.stack([model(p, np.random.default_rng([5, k])) for k, p in enumerate(vposes)])
        db = VirtualDatabase(np.arange(len(vposes)), vdesc, vposes)
        real = generate_trajectory(lumen, path, rng=rng)
        seg = real[300:400]
        q = np.stack([model(p, np.random.default_rng([6, k])) for k, p in enumerate(seg)])
        buf = build_virtual_buffer(db, q, R=40)
        ids = [i for i, _, _ in buf]
        assert len(ids) == 41 and ids == list(range(ids[0], ids[0] + 41))
        # the buffer covers the virtual frames nearest (in position) to the queried segment
        centre = np.mean([p.translation for p in seg], axis=0)
        vpos = np.array([p.translation for p in vposes])
        closest = int(np.argmin(np.linalg.norm(vpos - centre, axis=1)))
        assert ids[0] <= closest <= ids[-1]


class TestDescriptorModel:
    def test_unit_and_deterministic(self, rng):
        m = PoseDescriptorModel(dim=64, seed=1)
        p = random_pose(rng)
        a = m(p, np.random.default_rng(0))
        b = m(p, np.random.default_rng(0))
        assert np.array_equal(a, b) and abs(np.linalg.norm(a) - 1) < 1e-12

    def test_nearby_poses_more_similar(self):
        m = PoseDescriptorModel(noise=0.0)
        base = Pose.identity()
        near = Pose(np.eye(3), [1.0, 0, 0])
        far = Pose(np.eye(3), [40.0, 0, 0])
        assert m(base) @ m(near) > m(base) @ m(far)

    def test_small_dim_rejected(self):
        with pytest.raises(ValueError):
            PoseDescriptorModel(dim=6)
