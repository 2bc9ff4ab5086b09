from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lumenloc.geometry import rotvec_to_matrix
from lumenloc.metrics import (
    ALIGN_7DOF,
    ALIGN_NONE,
    Similarity,
    Trajectory,
    aggregate_reports,
    associate,
    ate,
    confidence_filtered_ate,
    confidence_order,
    evaluation_report,
    r_rpe,
    retained_count,
    umeyama_align,
)


def random_traj(rng, n=60):
    ts = np.arange(n) / 30.0
    pos = np.cumsum(rng.normal(size=(n, 3)), axis=0) * 2.0
    q = Rotation.random(n, random_state=int(rng.integers(2**31))).as_quat()
    return Trajectory(ts, pos, q)


def random_sim(rng, scale=None):
    R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    s = rng.uniform(0.2, 5.0) if scale is None else scale
    return Similarity(s, R, rng.uniform(-100, 100, size=3))


def with_positions(traj, pos):
    return Trajectory(traj.timestamps, pos, traj.quaternions)


class TestTrajectory:
    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], np.zeros((2, 3)), [[0, 0, 0, 1]] * 2)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError):
            Trajectory([0.0], np.zeros((1, 3)), [[0, 0, 0, 2]])

    def test_save_load(self, rng, tmp_path):
        t = random_traj(rng)
        t.save(tmp_path / "t.txt")
        back = Trajectory.load(tmp_path / "t.txt")
        assert np.array_equal(back.positions, t.positions) and np.array_equal(back.quaternions, t.quaternions)


class TestUmeyama:
    def test_recovers_known_similarity(self, rng):
        for _ in range(50):
            P = rng.normal(scale=30.0, size=(40, 3))
            sim = random_sim(rng, scale=2.0)
            got = umeyama_align(P, sim.apply(P))
            assert abs(got.scale - 2.0) < 1e-9
            assert np.max(np.abs(got.rotation - sim.rotation)) < 1e-9
            assert np.max(np.abs(got.translation - sim.translation)) < 1e-9

    def test_identity(self, rng):
        P = rng.normal(size=(10, 3))
        got = umeyama_align(P, P)
        assert got.scale == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(got.rotation, np.eye(3), atol=1e-12) and np.allclose(got.translation, 0, atol=1e-12)

    def test_idempotent(self, rng):
        P, Q = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        aligned = umeyama_align(P, Q).apply(P)
        again = umeyama_align(aligned, Q)
        assert again.scale == pytest.approx(1.0, abs=1e-9) and np.allclose(again.rotation, np.eye(3), atol=1e-9)

    def test_reflection_gives_proper_rotation(self, rng):
        P = rng.normal(size=(30, 3))
        Q = P * [1.0, 1.0, -1.0]
        got = umeyama_align(P, Q)
        assert np.linalg.det(got.rotation) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize(
        "P",
        [np.zeros((5, 3)), np.outer(np.arange(6.0), [1.0, 2.0, 3.0]), np.zeros((2, 3))],
        ids=["coincident", "collinear", "too-few"],
    )
    def test_degenerate_rejected(self, P):
        with pytest.raises(ValueError):
            umeyama_align(P, P)

    def test_planar_accepted(self, rng):
        P = rng.normal(size=(10, 3)) * [1.0, 1.0, 0.0]
        sim = random_sim(rng)
        got = umeyama_align(P, sim.apply(P))
        assert got.scale == pytest.approx(sim.scale, rel=1e-9)


class TestAte:
    def test_identical(self, rng):
        t = random_traj(rng)
        r = ate(t, t)
        assert (r.rmse, r.mean, r.std) == (0.0, 0.0, 0.0)

    def test_constant_offset(self, rng):
        t = random_traj(rng)
        shifted = with_positions(t, t.positions + [3.0, 0.0, 0.0])
        r = ate(shifted, t, ALIGN_NONE)
        assert r.mean == pytest.approx(3.0, abs=1e-12) and r.std < 1e-12
        assert ate(shifted, t, ALIGN_7DOF).mean < 1e-9

    def test_seven_dof_invariance(self, rng):
        ref = random_traj(rng)
        est = with_positions(ref, ref.positions + rng.normal(scale=0.5, size=ref.positions.shape))
        base = ate(est, ref, ALIGN_7DOF)
        for _ in range(20):
            moved = random_sim(rng).apply_trajectory(est)
            r = ate(moved, ref, ALIGN_7DOF)
            assert abs(r.rmse - base.rmse) < 1e-9 and abs(r.mean - base.mean) < 1e-9

    def test_mismatch(self, rng):
        t = random_traj(rng)
        with pytest.raises(ValueError):
            ate(t.subset(np.arange(10)), t)
        shifted = Trajectory(t.timestamps + 0.01, t.positions, t.quaternions)
        with pytest.raises(ValueError):
            ate(shifted, t)

    def test_unknown_mode(self, rng):
        t = random_traj(rng)
        with pytest.raises(ValueError):
            ate(t, t, "6dof")


class TestRpe:
    def test_identical(self, rng):
        t = random_traj(rng)
        assert r_rpe(t, t).mean < 1e-6

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_gauge_invariance(self, seed):
        rng = np.random.default_rng(seed)
        t = random_traj(rng, 20)
        G1, G2 = (Rotation.random(random_state=int(rng.integers(2**31))) for _ in range(2))
        a = Trajectory(t.timestamps, t.positions, (G1 * Rotation.from_quat(t.quaternions)).as_quat())
        b = Trajectory(t.timestamps, t.positions, (G2 * Rotation.from_quat(t.quaternions)).as_quat())
        assert np.max(r_rpe(a, b).errors) < 1e-6

    def test_injected_two_degrees(self, rng):
        ref = random_traj(rng, 30)
        R = ref.rotations.copy()
        bump = rotvec_to_matrix(math.radians(2.0) * np.array([0.0, 0.6, 0.8]))
        # a world-frame rotation applied from frame 15 on changes one relative step
        R[15:] = bump @ R[15:]
        est = Trajectory(ref.timestamps, ref.positions, Rotation.from_matrix(R).as_quat())
        e = r_rpe(est, ref).errors
        assert e[14] == pytest.approx(2.0, abs=1e-9)
        assert np.max(np.delete(e, 14)) < 1e-6

    def test_delta(self, rng):
        t = random_traj(rng, 10)
        assert len(r_rpe(t, t, delta=3).errors) == 7
        with pytest.raises(ValueError):
            r_rpe(t, t, delta=10)
        with pytest.raises(ValueError):
            r_rpe(t, t, delta=0)


class TestConfidenceFilter:
    def test_keep_one_bit_identical(self, rng):
        ref = random_traj(rng)
        est = with_positions(ref, ref.positions + rng.normal(size=ref.positions.shape))
        counts = rng.integers(0, 1000, size=len(ref))
        a, b = confidence_filtered_ate(est, ref, counts, 1.0), ate(est, ref, ALIGN_NONE)
        assert a.rmse == b.rmse and a.mean == b.mean and a.std == b.std

    def test_order_ties_by_earlier_frame(self):
        assert confidence_order([5, 9, 5, 9, 1]).tolist() == [1, 3, 0, 2, 4]

    @pytest.mark.parametrize("n,keep,expected", [(10, 0.9, 9), (10, 0.7, 7), (675, 0.9, 607), (3, 0.5, 1), (100, 0.6, 60)])
    def test_retained_count(self, n, keep, expected):
        assert retained_count(n, keep) == expected

    @pytest.mark.parametrize("keep", [0.0, -0.1, 1.1])
    def test_invalid_keep(self, keep):
        with pytest.raises(ValueError):
            retained_count(10, keep)

    def test_empty_retained(self, rng):
        t = random_traj(rng, 3)
        with pytest.raises(ValueError):
            confidence_filtered_ate(t, t, [1, 2, 3], 0.2)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_monotone_on_constructed_correlation(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_traj(rng, 200)
        err = rng.exponential(1.0, size=200)
        dirs = rng.normal(size=(200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        est = with_positions(ref, ref.positions + err[:, None] * dirs)
        counts = np.round(1000.0 - 100.0 * err).astype(int)  # higher count, smaller error
        values = [confidence_filtered_ate(est, ref, counts, k).mean for k in (1.0, 0.9, 0.8, 0.7, 0.6)]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


class TestReport:
    def test_identity_report(self, rng):
        t = random_traj(rng)
        rep = evaluation_report(t, t)
        assert rep["ate_rmse"] == 0.0 and rep["rrpe_mean"] < 1e-6
        assert rep["n_frames"] == 60 and rep["n_gaps"] == 0 and rep["filter_fraction"] == 0.0
        assert {"ate_rmse", "ate_mean", "ate_std", "rrpe_mean", "rrpe_std", "n_frames", "alignment_mode", "filter_fraction"} <= set(rep)

    def test_gaps_skip_pairs(self, rng):
        ref = random_traj(rng, 20)
        keep = np.array([i for i in range(20) if i not in (5, 6, 12)])
        est = ref.subset(keep)
        e, r = associate(est, ref)
        assert r.tolist() == keep.tolist() and e.tolist() == list(range(17))
        rep = evaluation_report(est, ref)
        assert rep["n_gaps"] == 3 and rep["n_frames"] == 17 and rep["ate_mean"] == 0.0

    def test_filter_needs_counts(self, rng):
        t = random_traj(rng)
        with pytest.raises(ValueError):
            evaluation_report(t, t, keep_fraction=0.9)

    def test_filter(self, rng):
        ref = random_traj(rng, 10)
        est = with_positions(ref, ref.positions + np.arange(10)[:, None] * [1.0, 0.0, 0.0])
        counts = {t: 100 - i for i, t in enumerate(ref.timestamps)}
        rep = evaluation_report(est, ref, keep_fraction=0.8, inlier_counts=counts)
        assert rep["n_frames"] == 8 and rep["ate_mean"] == pytest.approx(3.5)
        assert rep["filter_fraction"] == 0.2

    def test_filter_rejects_alignment(self, rng):
        t = random_traj(rng, 10)
        counts = {ts: 1 for ts in t.timestamps}
        with pytest.raises(ValueError, match="without alignment"):
            evaluation_report(t, t, ALIGN_7DOF, keep_fraction=0.8, inlier_counts=counts)

    def test_no_overlap(self, rng):
        t = random_traj(rng, 5)
        shifted = Trajectory(t.timestamps + 100.0, t.positions, t.quaternions)
        with pytest.raises(ValueError):
            evaluation_report(shifted, t)

    def test_aggregate(self):
        reps = [
            {"ate_mean": 1.0, "rrpe_mean": 0.5, "n_frames": 10},
            {"ate_mean": 3.0, "rrpe_mean": 1.5, "n_frames": 30},
        ]
        agg = aggregate_reports(reps)
        assert agg["n_sequences"] == 2
        assert agg["ate_mean_of_means"] == 2.0 and agg["ate_std_of_means"] == 1.0
        assert agg["ate_pooled_mean"] == 2.5 and agg["rrpe_mean_of_means"] == 1.0
        with pytest.raises(ValueError):
            aggregate_reports([])
