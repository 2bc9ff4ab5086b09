from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import random_pose
from lumenloc.geometry import Pose, rotation_angle, unproject, unproject_points
from lumenloc.pose_solver import (
    LocalizationFailure,
    RansacConfig,
    ScenePointMap,
    apply_increment,
    estimate_pose,
    refine_pose,
    reprojection_jacobian,
    required_iterations,
    residual,
    score,
    solve_p3p,
)
from lumenloc.simulator import (
    PredictorNoiseModel,
    corrupt_map,
    generate_lumen,
    generate_trajectory,
    render_scene_map,
)


def brute_force_count(K, pose, scene_map, tau):
    """Inlier count evaluated cell by cell with scalar math."""
    R, t = pose.rotation.tolist(), pose.translation.tolist()
    count = 0
    for r in range(scene_map.rows):
        for c in range(scene_map.cols):
            if not scene_map.valid[r, c]:
                continue
            X = [scene_map.points[r, c, k] - t[k] for k in range(3)]
            xc = [sum(R[k][j] * X[k] for k in range(3)) for j in range(3)]
            if xc[2] <= 1e-6:
                continue
            u = K.fx * xc[0] / xc[2] + K.cx
            v = K.fy * xc[1] / xc[2] + K.cy
            pu = scene_map.origin[0] + c * scene_map.stride
            pv = scene_map.origin[1] + r * scene_map.stride
            if math.hypot(u - pu, v - pv) < tau:
                count += 1
    return count


@pytest.fixture(scope="module")
def lumen_scene():
    rng = np.random.default_rng(7)
    lumen = generate_lumen(rng)
    poses = generate_trajectory(lumen, (0, 1), rng=rng)
    return lumen, poses


def _map(lumen, pose, K, stride=4):
    return render_scene_map(lumen, pose, K, stride)


class TestResidualAndScore:
    def test_exact_correspondence(self, K_default, rng):
        pose = random_pose(rng)
        X = unproject(K_default, pose, [100.0, 80.0], 12.0)
        assert residual(K_default, pose, [100.0, 80.0], X) == pytest.approx(0.0, abs=1e-9)

    def test_three_pixel_shift(self, K100):
        X = unproject(K100, Pose.identity(), [53.0, 50.0], 10.0)
        assert residual(K100, Pose.identity(), [50.0, 50.0], X) == pytest.approx(3.0, abs=1e-12)

    def test_behind_camera_is_inf(self, K100):
        assert residual(K100, Pose.identity(), [50.0, 50.0], [0.0, 0.0, -5.0]) == math.inf

    def test_clean_map_counts_all(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        m = _map(lumen, poses[100], K_default)
        for tau in (1e-3, 1.0, 10.0):
            assert score(K_default, poses[100], m, tau) == m.n_valid

    def test_far_pose_counts_zero(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        m = _map(lumen, poses[100], K_default)
        far = Pose(poses[100].rotation, poses[100].translation + np.array([500.0, 0.0, 0.0]))
        assert score(K_default, far, m, 10.0) == 0 == brute_force_count(K_default, far, m, 10.0)

    @pytest.mark.parametrize("k", [0, 1, 17, 250])
    def test_k_perturbed_cells(self, K_default, lumen_scene, k):
        lumen, poses = lumen_scene
        pose = poses[50]
        m = _map(lumen, pose, K_default, stride=8)
        pix, _ = m.correspondences()
        rng = np.random.default_rng(k)
        pts = m.points.copy()
        flat = np.flatnonzero(m.valid.ravel())
        chosen = rng.choice(flat, size=k, replace=False)
        # move the chosen cells along their pixel offset by 15 px at the same depth
        for idx in chosen:
            r, c = divmod(int(idx), m.cols)
            Xc = (pts[r, c] - pose.translation) @ pose.rotation
            px = m.pixel_grid()[r, c] + np.array([15.0, 0.0])
            pts[r, c] = unproject(K_default, pose, px, Xc[2])
        bad = m.with_points(pts)
        assert score(K_default, pose, bad, 10.0) == m.n_valid - k

    def test_non_positive_tau_rejected(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        with pytest.raises(ValueError):
            score(K_default, poses[0], _map(lumen, poses[0], K_default), 0.0)


class TestScenePointMap:
    def test_invalid_shapes(self):
        with pytest.raises(ValueError):
            ScenePointMap(np.zeros((4, 4, 2)), np.ones((4, 4), bool), 8)
        with pytest.raises(ValueError):
            ScenePointMap(np.zeros((4, 4, 3)), np.ones((4, 5), bool), 8)
        with pytest.raises(ValueError):
            ScenePointMap(np.zeros((4, 4, 3)), np.ones((4, 4), bool), 0)

    def test_nan_in_valid_cell_rejected(self):
        pts = np.zeros((2, 2, 3))
        pts[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            ScenePointMap(pts, np.ones((2, 2), bool), 4)
        ScenePointMap(pts, np.array([[False, True], [True, True]]), 4)  # invalid cells may hold anything

    def test_pixel_grid(self):
        m = ScenePointMap(np.zeros((2, 3, 3)), np.ones((2, 3), bool), 8, (2.0, 4.0))
        assert m.pixel_grid()[1, 2].tolist() == [18.0, 12.0]


class TestP3P:
    def test_recovers_1000_random_poses(self, K_default):
        rng = np.random.default_rng(2024)
        worst_t = worst_r = 0.0
        for _ in range(1000):
            pose = random_pose(rng)
            pix = rng.uniform([0, 0], [320, 240], size=(3, 2))
            pts = unproject_points(K_default, pose, pix, rng.uniform(2.0, 80.0, size=3))
            cands = solve_p3p(pix, pts, K_default)
            assert 1 <= len(cands) <= 4
            errs = [
                (np.linalg.norm(c.translation - pose.translation), rotation_angle(c.rotation.T @ pose.rotation))
                for c in cands
            ]
            et, er = min(errs)
            worst_t, worst_r = max(worst_t, et), max(worst_r, er)
        assert worst_t < 1e-6 and worst_r < 1e-8

    def test_candidates_reproject(self, K_default, rng):
        for _ in range(200):
            pose = random_pose(rng)
            pix = rng.uniform([0, 0], [320, 240], size=(3, 2))
            pts = unproject_points(K_default, pose, pix, rng.uniform(2.0, 80.0, size=3))
            for c in solve_p3p(pix, pts, K_default):
                for p, X in zip(pix, pts):
                    assert residual(K_default, c, p, X) < 1e-6

    def test_collinear_empty(self, K_default):
        pts = np.array([[0.0, 0.0, 10.0], [1.0, 1.0, 11.0], [2.0, 2.0, 12.0]])
        pix = np.array([[160.0, 120.0], [170.0, 130.0], [180.0, 140.0]])
        assert solve_p3p(pix, pts, K_default) == []

    def test_coincident_empty(self, K_default):
        pts = np.array([[0.0, 0.0, 10.0], [0.0, 0.0, 10.0], [1.0, 0.0, 10.0]])
        pix = np.array([[160.0, 120.0], [160.0, 120.0], [180.0, 120.0]])
        assert solve_p3p(pix, pts, K_default) == []


class TestEstimatePose:
    def test_clean_exact(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        for pose in poses[::60]:
            m = _map(lumen, pose, K_default)
            est = estimate_pose(K_default, m, RansacConfig(seed=1))
            assert np.linalg.norm(est.pose.translation - pose.translation) < 1e-6
            assert rotation_angle(est.pose.rotation.T @ pose.rotation) < 1e-8
            assert est.inlier_count == m.n_valid == int(est.inlier_mask.sum())

    def test_noisy_accuracy(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        noise = PredictorNoiseModel(sigma=0.5, outlier_fraction=0.3)
        errs = []
        for i, pose in enumerate(poses[::10][:40]):
            m = corrupt_map(_map(lumen, pose, K_default), noise, np.random.default_rng(i))
            est = estimate_pose(K_default, m)
            errs.append(np.linalg.norm(est.pose.translation - pose.translation))
        assert np.median(errs) < 1.0

    def test_too_few_cells(self, K_default):
        valid = np.zeros((4, 4), bool)
        valid[0, :4] = True
        m = ScenePointMap(np.ones((4, 4, 3)), valid, 8)
        with pytest.raises(LocalizationFailure) as info:
            estimate_pose(K_default, m)
        assert info.value.inlier_count == 0

    def test_degenerate_map_fails(self, K_default):
        # every cell holds the same point: no sample yields a hypothesis
        m = ScenePointMap(np.tile([1.0, 2.0, 30.0], (6, 8, 1)), np.ones((6, 8), bool), 16)
        with pytest.raises(LocalizationFailure):
            estimate_pose(K_default, m)

    def test_deterministic(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        m = corrupt_map(_map(lumen, poses[30], K_default), PredictorNoiseModel(0.5, 0.3), np.random.default_rng(3))
        a = estimate_pose(K_default, m, RansacConfig(seed=9))
        b = estimate_pose(K_default, m, RansacConfig(seed=9))
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())
        assert a.inlier_count == b.inlier_count and a.iterations_used == b.iterations_used
        assert np.array_equal(a.inlier_mask, b.inlier_mask)

    def test_score_consistency_and_argmax(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        for i in range(5):
            m = corrupt_map(_map(lumen, poses[40 * i], K_default, 8), PredictorNoiseModel(0.5, 0.3), np.random.default_rng(i))
            log = []
            est = estimate_pose(K_default, m, RansacConfig(seed=i), hypothesis_log=log)
            assert est.inlier_count == brute_force_count(K_default, est.pose, m, 10.0)
            scores = [s for _, _, s in log]
            assert est.ransac_inlier_count == max(scores)
            # the retained hypothesis is the first one reaching the maximum
            R, t, s = log[scores.index(max(scores))]
            assert np.allclose(est.ransac_pose.rotation, R, atol=1e-12)
            # logged scores are complete counts of each hypothesis
            for R, t, s in log[:20]:
                h = Pose(R, t)
                assert s == brute_force_count(K_default, h, m, 10.0)

    def test_hypothesis_log_does_not_change_result(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        m = corrupt_map(_map(lumen, poses[5], K_default), PredictorNoiseModel(0.5, 0.3), np.random.default_rng(8))
        a = estimate_pose(K_default, m)
        b = estimate_pose(K_default, m, hypothesis_log=[])
        assert np.array_equal(a.pose.matrix(), b.pose.matrix()) and a.inlier_count == b.inlier_count

    def test_no_refine(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        m = corrupt_map(_map(lumen, poses[5], K_default), PredictorNoiseModel(0.5, 0.3), np.random.default_rng(8))
        est = estimate_pose(K_default, m, RansacConfig(refine=False))
        assert est.pose is est.ransac_pose

    def test_early_exit_on_clean(self, K_default, lumen_scene):
        lumen, poses = lumen_scene
        est = estimate_pose(K_default, _map(lumen, poses[0], K_default))
        assert est.iterations_used < 16

    @pytest.mark.parametrize(
        "kwargs", [dict(inlier_threshold=0.0), dict(max_iterations=0), dict(confidence_stop=1.0), dict(confidence_stop=0.0)]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            RansacConfig(**kwargs)

    def test_required_iterations(self):
        # log(1 - 0.999) / log(1 - 0.5**4)
        assert required_iterations(0.5, 0.999) == pytest.approx(107.033, abs=1e-3)
        assert required_iterations(1.0, 0.999) == 0


class TestRefine:
    def _data(self, K, lumen_scene, i=20):
        lumen, poses = lumen_scene
        m = _map(lumen, poses[i], K, 8)
        pix, pts = m.correspondences()
        return poses[i], pix, pts

    def test_fixed_point(self, K_default, lumen_scene):
        gt, pix, pts = self._data(K_default, lumen_scene)
        pose, res = refine_pose(K_default, gt, pix, pts)
        assert res < 1e-9
        assert np.linalg.norm(pose.translation - gt.translation) < 1e-9

    def test_basin_of_attraction(self, K_default, lumen_scene):
        gt, pix, pts = self._data(K_default, lumen_scene)
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = rng.normal(size=3)
            w = rng.normal(size=3)
            start = Pose.from_rotvec(0.05 * w / np.linalg.norm(w)) @ gt
            start = Pose(start.rotation, gt.translation + 2.0 * d / np.linalg.norm(d))
            pose, res = refine_pose(K_default, start, pix, pts)
            assert np.linalg.norm(pose.translation - gt.translation) < 1e-8
            assert rotation_angle(pose.rotation.T @ gt.rotation) < 1e-8

    def test_monotone_cost(self, K_default, lumen_scene):
        gt, pix, pts = self._data(K_default, lumen_scene)
        noisy = pts + np.random.default_rng(1).normal(scale=0.3, size=pts.shape)
        start = Pose(gt.rotation, gt.translation + np.array([1.0, -1.0, 0.5]))
        trace = []
        refine_pose(K_default, start, pix, noisy, trace=trace)
        assert len(trace) > 1
        assert all(b <= a for a, b in zip(trace, trace[1:]))

    def test_rank_deficient_returns_initial(self, K_default):
        # every point on the optical axis: the Jacobian loses rank
        pts = np.array([[0.0, 0.0, z] for z in range(5, 11)], dtype=float)
        pix = np.tile([K_default.cx, K_default.cy], (6, 1))
        start = Pose.identity()
        pose, _ = refine_pose(K_default, start, pix, pts)
        assert pose is start

    def test_needs_six(self, K_default):
        with pytest.raises(ValueError):
            refine_pose(K_default, Pose.identity(), np.zeros((5, 2)), np.ones((5, 3)))

    def test_jacobian_finite_differences(self, K_default):
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(100):
            pose = random_pose(rng)
            pts = unproject_points(
                K_default, pose, rng.uniform([0, 0], [320, 240], size=(8, 2)), rng.uniform(3.0, 60.0, size=8)
            )
            _, _, J = reprojection_jacobian(K_default, pose, pts)
            num = np.empty_like(J)
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                p_plus, _, _ = reprojection_jacobian(K_default, apply_increment(pose, e), pts)
                p_minus, _, _ = reprojection_jacobian(K_default, apply_increment(pose, -e), pts)
                num[:, :, k] = (p_plus - p_minus) / (2 * h)
            rel = np.linalg.norm(J - num) / np.linalg.norm(num)
            assert rel < 1e-5
