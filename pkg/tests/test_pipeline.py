import time

import numpy as np
import pytest

from posetune.geometry import ObjectModel, PointCloud, Pose, random_rotation, rotation_about_axis, transform_cloud, voxel_downsample
from posetune.metrics import add_correct, add_score
from posetune.objects import make_box
from posetune.pipeline import (
    FIXED,
    ContinuousParams,
    DiscreteParams,
    InsufficientMatches,
    Matches,
    PoseHypothesis,
    c2f_icp,
    depth_check,
    estimate,
    estimate_all,
    extract_candidates,
    generate_votes,
    kabsch,
    rank_candidates,
    ransac_pose,
)
from posetune.scenes import Scene, generate_scene
from posetune.camera import default_camera, render_depth

OPTIMIZED = ContinuousParams(vote_threshold=0.174, ransac_dist=19.88, icp_dist=4.85,
                             icp_scale=1.24, background_dist=86.0, accept_dist=12.0,
                             cut_radius=108.0)
SMALL_DP = DiscreteParams(classified=8, estimated=2, ransac_iters=500,
                          depth_checked=2, icp_iters=10)


@pytest.fixture(scope="module")
def box():
    return make_box("crate", [45, 60, 35], [0.85, 0.25, 0.2])


@pytest.fixture(scope="module")
def clean_scene(box):
    return generate_scene([box], clutter_level=0.0, occlusion_level=0.0, seed=31)


@pytest.fixture(scope="module")
def cluttered_scene(box):
    return generate_scene([box], clutter_level=0.75, occlusion_level=0.0, seed=37)


def empty_scene():
    cam = default_camera()
    return Scene(PointCloud(np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3))),
                 {}, np.zeros((cam.height, cam.width)), cam, 0)


class TestParameterTypes:
    def test_continuous_validation(self):
        with pytest.raises(ValueError):
            ContinuousParams(1.2, 10, 2, 2, 10, 5, 72)
        with pytest.raises(ValueError):
            ContinuousParams(0.5, -1, 2, 2, 10, 5, 72)

    def test_discrete_feasibility(self):
        with pytest.raises(ValueError, match="estimated"):
            DiscreteParams(8, 10, 500, 1, 10)
        with pytest.raises(ValueError, match="depth_checked"):
            DiscreteParams(8, 2, 5, 10, 10)

    def test_vector_roundtrip(self):
        params = ContinuousParams.heuristic()
        again = ContinuousParams.from_vector(params.as_vector())
        assert again == params

    def test_hypothesis_score_range(self):
        with pytest.raises(ValueError):
            PoseHypothesis(Pose.identity(), 3, depth_score=1.5)


class TestExtractCandidates:
    def test_single_object_scene_yields_centered_candidate(self, box, clean_scene):
        dp = DiscreteParams(1, 1, 500, 1, 10)
        candidates = extract_candidates(clean_scene, box, OPTIMIZED, dp, seed=0)
        assert len(candidates) == 1
        center = clean_scene.gt_poses["crate"].translation
        offset = np.linalg.norm(candidates[0].points.mean(axis=0) - center)
        assert offset < OPTIMIZED.cut_radius

    def test_empty_scene_gives_no_candidates(self, box):
        assert extract_candidates(empty_scene(), box, OPTIMIZED, SMALL_DP) == []

    def test_size_constraints_on_cluttered_scene(self, box, cluttered_scene):
        candidates = extract_candidates(cluttered_scene, box, OPTIMIZED,
                                        DiscreteParams(8, 8, 500, 1, 10), seed=1)
        assert 0 < len(candidates) <= 8
        for cand in candidates:
            assert FIXED.min_points <= len(cand) <= FIXED.input_points


class TestRankCandidates:
    def test_object_candidate_outranks_clutter(self, box, clean_scene):
        g = np.random.default_rng(3)
        object_points = clean_scene.cloud.select(
            g.choice(len(clean_scene.cloud), 600, replace=False))
        plane = np.column_stack([g.uniform(-150, 150, (600, 2)),
                                 np.full(600, 800.0)])
        clutter = PointCloud(plane, colors=np.full((600, 3), 0.5))
        ranked = rank_candidates([clutter, object_points], box)
        assert ranked[0] is object_points

    def test_single_candidate_identity(self, box, clean_scene):
        only = clean_scene.cloud
        assert rank_candidates([only], box) == [only]

    def test_ties_keep_input_order(self, box, clean_scene):
        a = clean_scene.cloud
        ranked = rank_candidates([a, a], box)
        assert ranked[0] is a and ranked[1] is a


class TestGenerateVotes:
    def make_candidate(self, box, clean_scene):
        dp = DiscreteParams(1, 1, 500, 1, 10)
        return extract_candidates(clean_scene, box, OPTIMIZED, dp, seed=0)[0]

    def test_threshold_off_keeps_every_point(self, box, clean_scene):
        candidate = self.make_candidate(box, clean_scene)
        gt = clean_scene.gt_poses["crate"]
        matches = generate_votes(candidate, box, 1e-9, gt, seed=0)
        assert len(matches) == len(candidate)

    def test_degenerate_threshold_rejects(self, box, clean_scene):
        candidate = self.make_candidate(box, clean_scene)
        gt = clean_scene.gt_poses["crate"]
        with pytest.raises(InsufficientMatches):
            generate_votes(candidate, box, 1.0, gt, seed=0)

    def test_published_threshold_passes_on_clean_candidate(self, box, clean_scene):
        candidate = self.make_candidate(box, clean_scene)
        gt = clean_scene.gt_poses["crate"]
        matches = generate_votes(candidate, box, 0.174, gt, seed=0)
        assert len(matches) >= FIXED.min_matches

    def test_match_pairs_are_scene_to_keypoint(self, box, clean_scene):
        candidate = self.make_candidate(box, clean_scene)
        gt = clean_scene.gt_poses["crate"]
        matches = generate_votes(candidate, box, 0.3, gt, seed=0)
        keypoint_set = {tuple(k) for k in box.keypoints}
        assert all(tuple(k) in keypoint_set for k in matches.model_points[:20])


def synthetic_matches(model, pose, n_inliers, n_outliers, noise, seed):
    g = np.random.default_rng(seed)
    src = model.cloud.points[g.choice(len(model.cloud), n_inliers, replace=False)]
    dst = pose.apply(src) + g.normal(0, noise, (n_inliers, 3))
    out_src = model.cloud.points[g.choice(len(model.cloud), n_outliers)] \
        if n_outliers else np.empty((0, 3))
    out_dst = pose.translation + g.uniform(-80, 80, (n_outliers, 3))
    return Matches(np.vstack([dst, out_dst]), np.vstack([src, out_src]),
                   np.ones(n_inliers + n_outliers))


class TestRansac:
    def test_exact_matches_recover_pose(self, box):
        g = np.random.default_rng(5)
        pose = Pose(random_rotation(g), [10, -20, 500.0])
        matches = synthetic_matches(box, pose, 200, 0, 0.0, seed=6)
        hyps = ransac_pose(matches, 10.0, 200, box.diagonal, seed=0)
        best = hyps[0]
        assert best.inlier_count == 200
        np.testing.assert_allclose(best.pose.rotation, pose.rotation, atol=1e-6)
        np.testing.assert_allclose(best.pose.translation, pose.translation, atol=1e-6)

    def test_robust_to_half_outliers(self, box):
        g = np.random.default_rng(7)
        failures = 0
        for trial in range(20):
            pose = Pose(random_rotation(g), [g.uniform(-30, 30), 0, 500.0])
            matches = synthetic_matches(box, pose, 100, 100, 0.5, seed=100 + trial)
            hyps = ransac_pose(matches, 10.0, 1500, box.diagonal, seed=trial)
            if add_score(box, pose, hyps[0].pose) > 0.02 * box.diagonal:
                failures += 1
        assert failures == 0

    def test_pure_outliers_leave_tiny_consensus(self, box):
        g = np.random.default_rng(9)
        pose = Pose(random_rotation(g), [0, 0, 500.0])
        matches = synthetic_matches(box, pose, 0, 150, 0.0, seed=11)
        hyps = ransac_pose(matches, 5.0, 500, box.diagonal, seed=0)
        assert hyps[0].inlier_count <= 15

    def test_hypotheses_sorted_by_inliers(self, box):
        g = np.random.default_rng(13)
        pose = Pose(random_rotation(g), [0, 0, 500.0])
        matches = synthetic_matches(box, pose, 120, 80, 0.5, seed=15)
        hyps = ransac_pose(matches, 10.0, 500, box.diagonal, seed=0)
        counts = [h.inlier_count for h in hyps]
        assert counts == sorted(counts, reverse=True)
        assert len(hyps) == 10  # 500 iterations in chunks of 50

    def test_scale_equivariant_decisions(self, box):
        # doubling all geometry leaves diagonal-relative correctness unchanged
        doubled = ObjectModel.from_cloud(
            "big", PointCloud(box.cloud.points * 2.0, box.cloud.normals,
                              box.cloud.colors))
        g = np.random.default_rng(17)
        for trial in range(10):
            rot = random_rotation(g)
            pose1 = Pose(rot, [5.0, 8.0, 500.0])
            pose2 = Pose(rot, [10.0, 16.0, 1000.0])
            m1 = synthetic_matches(box, pose1, 120, 60, 0.4, seed=trial)
            m2 = Matches(m1.scene_points * 2.0, m1.model_points * 2.0,
                         m1.confidences)
            h1 = ransac_pose(m1, 10.0, 500, box.diagonal, seed=trial)[0]
            h2 = ransac_pose(m2, 10.0, 500, doubled.diagonal, seed=trial)[0]
            assert add_correct(box, pose1, h1.pose, False) == \
                add_correct(doubled, pose2, h2.pose, False)


class TestC2fIcp:
    def test_truth_is_fixed_point(self, box):
        pose = Pose(rotation_about_axis([0, 1, 0], 0.4), [5, -8, 520.0])
        model_icp = voxel_downsample(box.cloud, FIXED.icp_model_voxel)
        candidate = PointCloud(pose.apply(model_icp.points))
        hyp = PoseHypothesis(pose, 100)
        out = c2f_icp(hyp, candidate, box, icp_dist=4.0, icp_scale=2.0, icp_iters=5)
        np.testing.assert_allclose(out.pose.rotation, pose.rotation, atol=1e-6)
        np.testing.assert_allclose(out.pose.translation, pose.translation, atol=1e-6)

    def test_converges_from_small_offset(self, box):
        g = np.random.default_rng(19)
        pose = Pose(random_rotation(g), [0, 0, 520.0])
        candidate = transform_cloud(box.cloud, pose)
        start = Pose(pose.rotation, pose.translation + [2.0, 0, 0])
        out = c2f_icp(PoseHypothesis(start, 100), candidate, box,
                      icp_dist=4.85, icp_scale=1.24, icp_iters=10)
        assert add_score(box, pose, out.pose) < 0.5

    def test_stalls_when_nothing_in_reach(self, box):
        pose = Pose(np.eye(3), [0, 0, 520.0])
        candidate = PointCloud(pose.apply(box.cloud.points) + [500.0, 0, 0])
        out = c2f_icp(PoseHypothesis(pose, 100), candidate, box,
                      icp_dist=2.0, icp_scale=1.0, icp_iters=5)
        assert "icp stalled" in out.flags
        np.testing.assert_array_equal(out.pose.rotation, pose.rotation)


class TestDepthCheck:
    def test_exact_pose_scores_high(self, box, clean_scene):
        gt = clean_scene.gt_poses["crate"]
        out = depth_check(PoseHypothesis(gt, 500), clean_scene, box,
                          background_dist=86.0, accept_dist=12.0)
        assert out.depth_score >= 0.95

    def test_displaced_pose_scores_low(self, box, clean_scene):
        gt = clean_scene.gt_poses["crate"]
        moved = Pose(gt.rotation, gt.translation + [160.0, 0, 0])
        out = depth_check(PoseHypothesis(moved, 500), clean_scene, box,
                          background_dist=86.0, accept_dist=12.0)
        assert out.depth_score < 0.2

    def test_huge_background_dist_disables_violation(self, box, cluttered_scene):
        # floating above the ground plane: penalized only when bd is finite
        pose = Pose(np.eye(3), [0, 0, 600.0])
        tight = depth_check(PoseHypothesis(pose, 10), cluttered_scene, box,
                            background_dist=5.0, accept_dist=5.0)
        loose = depth_check(PoseHypothesis(pose, 10), cluttered_scene, box,
                            background_dist=1e9, accept_dist=5.0)
        assert loose.depth_score >= tight.depth_score


class TestEstimate:
    def test_clean_scene_with_published_params(self, box, clean_scene):
        result = estimate(clean_scene, box, OPTIMIZED, SMALL_DP, seed=0)
        assert result.found
        gt = clean_scene.gt_poses["crate"]
        assert add_correct(box, gt, result.hypothesis.pose, False)

    def test_missing_object_reports_no_detection(self, box, clean_scene):
        stranger = make_box("stranger", [40, 40, 40], [0.1, 0.8, 0.2])
        result = estimate(clean_scene, stranger, OPTIMIZED, SMALL_DP, seed=0)
        assert not result.found
        assert result.reason == "no detection"

    def test_timings_nonnegative_and_bounded_by_wall(self, box, cluttered_scene):
        t0 = time.perf_counter()
        result = estimate(cluttered_scene, box, OPTIMIZED, SMALL_DP, seed=0)
        wall = time.perf_counter() - t0
        assert all(v >= 0 for v in result.timings.values())
        assert sum(result.timings.values()) <= wall

    def test_deterministic(self, box, cluttered_scene):
        a = estimate(cluttered_scene, box, OPTIMIZED, SMALL_DP, seed=4)
        b = estimate(cluttered_scene, box, OPTIMIZED, SMALL_DP, seed=4)
        assert a.found == b.found
        np.testing.assert_array_equal(a.hypothesis.pose.rotation,
                                      b.hypothesis.pose.rotation)
        np.testing.assert_array_equal(a.hypothesis.pose.translation,
                                      b.hypothesis.pose.translation)

    def test_result_serialization(self, box, clean_scene):
        result = estimate(clean_scene, box, OPTIMIZED, SMALL_DP, seed=0)
        data = result.to_dict()
        assert set(data["timing"]) == {"t_pre", "t_net", "t_ran", "t_icp", "t_depth"}
        assert len(data["pose"]["rotation"]) == 9
        assert len(data["pose"]["translation"]) == 3

    def test_estimate_all_shares_preprocessing(self, box, cluttered_scene):
        other = make_box("slab", [30, 50, 60], [0.2, 0.45, 0.8])
        scene = generate_scene([box, other], 0.5, 0.0, seed=41)
        bundle = estimate_all(scene, [box, other], OPTIMIZED, SMALL_DP, seed=0)
        assert set(bundle.results) == {"crate", "slab"}
        assert bundle.timings["t_pre"] > 0
        assert bundle.total_time > 0
        solo = estimate(scene, box, OPTIMIZED, SMALL_DP, seed=0)
        joint = bundle.results["crate"]
        np.testing.assert_allclose(solo.hypothesis.pose.translation,
                                   joint.hypothesis.pose.translation, atol=1e-9)


class TestKabsch:
    def test_recovers_random_rigid_transform(self):
        g = np.random.default_rng(23)
        for _ in range(20):
            src = g.uniform(-30, 30, (10, 3))
            pose = Pose(random_rotation(g), g.uniform(-20, 20, 3))
            est = kabsch(src, pose.apply(src))
            np.testing.assert_allclose(est.rotation, pose.rotation, atol=1e-9)
            np.testing.assert_allclose(est.translation, pose.translation, atol=1e-8)

    def test_never_returns_reflection(self):
        g = np.random.default_rng(29)
        for _ in range(50):
            src = g.uniform(-1, 1, (3, 3))
            dst = g.uniform(-1, 1, (3, 3))
            pose = kabsch(src, dst)  # constructor asserts det=+1
            assert np.linalg.det(pose.rotation) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.slow
class TestRecallMonotonicity:
    def test_more_ransac_iterations_never_meaningfully_hurt(self, box):
        recalls = {}
        for ri in (500, 2500):
            hits = 0
            for s in range(50):
                scene = generate_scene([box], 0.5, 0.0, seed=600 + s)
                dp = DiscreteParams(4, 2, ri, 2, 10)
                result = estimate(scene, box, OPTIMIZED, dp, seed=s)
                if result.found and add_correct(box, scene.gt_poses["crate"],
                                                result.hypothesis.pose, False):
                    hits += 1
            recalls[ri] = hits / 50
        assert recalls[2500] >= recalls[500] - 0.02
