"""Desk-scale pose-estimation pipeline with the tunable parameter surface.

The neural candidate classifier and voter of a full system are replaced by
deterministic geometric surrogates (density/color seed scoring; nearest
keypoint voting against a jittered ground truth) that keep the parameter
semantics intact: the vote threshold trades match count against purity, and
every distance threshold scales with the object diagonal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, render_depth
from .geometry import ObjectModel, PointCloud, Pose, bbox_diagonal, rotation_about_axis, voxel_downsample
from .scenes import Scene
from .seeding import derive_rng

# Reference diagonal for diagonal-relative distance scaling (mm).
DIAGONAL_REF = 100.0
# Vote-oracle jitter standing in for network prediction error.
VOTE_ROT_SIGMA_DEG = 1.2
VOTE_TRANS_SIGMA = 1.2
# Residual decay scale of vote confidence, as a fraction of the diagonal.
# Small enough that the vote threshold genuinely trades match count against
# purity: tight thresholds starve RANSAC once scenes get noisy.
VOTE_CONF_FRACTION = 0.08
# Color-similarity decay for candidate scoring.
COLOR_SIM_SCALE = 0.3
# Scene depth jump treated as a geometric edge for the contour check (mm).
DEPTH_EDGE_JUMP = 20.0


@dataclass(frozen=True)
class FixedParams:
    """Structural constants of the pipeline; not subject to optimization."""

    icp_resolutions: int = 3
    input_points: int = 2048
    min_points: int = 512
    min_matches: int = 100
    scene_voxel: float = 1.0
    icp_model_voxel: float = 5.0
    max_keypoints: int = 100
    ransac_chunk: int = 50
    normal_radius: float = 10.0


FIXED = FixedParams()


@dataclass(frozen=True)
class ContinuousParams:
    """The seven real-valued pipeline parameters (distances in mm)."""

    vote_threshold: float    # keep votes above this fraction of the best confidence
    ransac_dist: float       # RANSAC inlier distance
    icp_dist: float          # finest ICP correspondence cut-off
    icp_scale: float         # coarse-to-fine cut-off multiplier per stage
    background_dist: float   # scene-closer-than-model margin counted as violation
    accept_dist: float       # depth agreement margin for projected model pixels
    cut_radius: float        # candidate extraction radius

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vote_threshold > 1:
            raise ValueError("vote_threshold must be <= 1")

    FIELD_ORDER = ("vote_threshold", "ransac_dist", "icp_dist", "icp_scale",
                   "background_dist", "accept_dist", "cut_radius")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELD_ORDER}

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.FIELD_ORDER])

    @staticmethod
    def from_vector(values) -> "ContinuousParams":
        return ContinuousParams(*[float(v) for v in values])

    @staticmethod
    def heuristic() -> "ContinuousParams":
        """Hand-tuned defaults: the baseline the optimizer is measured against."""
        return ContinuousParams(vote_threshold=0.95, ransac_dist=10.0, icp_dist=2.5,
                                icp_scale=2.0, background_dist=10.0, accept_dist=5.0,
                                cut_radius=72.0)


@dataclass(frozen=True)
class DiscreteParams:
    """Integer parameters trading recall against runtime."""

    classified: int      # candidate clouds scored by the classifier
    estimated: int       # best-ranked clouds carried into pose estimation
    ransac_iters: int
    depth_checked: int   # hypotheses refined and depth-checked per cloud
    icp_iters: int       # ICP iterations per resolution stage

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.estimated > self.classified:
            raise ValueError("estimated exceeds classified")
        if self.depth_checked > self.ransac_iters:
            raise ValueError("depth_checked exceeds ransac_iters")

    def as_dict(self) -> dict:
        return {"classified": self.classified, "estimated": self.estimated,
                "ransac_iters": self.ransac_iters, "depth_checked": self.depth_checked,
                "icp_iters": self.icp_iters}

    @staticmethod
    def from_dict(data: dict) -> "DiscreteParams":
        return DiscreteParams(int(data["classified"]), int(data["estimated"]),
                              int(data["ransac_iters"]), int(data["depth_checked"]),
                              int(data["icp_iters"]))


@dataclass(frozen=True)
class PoseHypothesis:
    pose: Pose
    inlier_count: int
    depth_score: float = 0.0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.inlier_count < 0:
            raise ValueError("inlier_count must be >= 0")
        if not 0.0 <= self.depth_score <= 1.0:
            raise ValueError("depth_score outside [0, 1]")


class InsufficientMatches(Exception):
    """Raised when voting leaves fewer matches than the pipeline minimum."""


@dataclass(frozen=True)
class Matches:
    """Scene-point to model-keypoint correspondences with vote confidences."""

    scene_points: np.ndarray
    model_points: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.confidences)


@dataclass
class ScenePrep:
    """Model-independent scene preprocessing shared across objects."""

    cloud: PointCloud
    tree: cKDTree | None
    seed_indices: np.ndarray
    seed_density: np.ndarray


def prepare_scene(scene: Scene, cp: ContinuousParams, dp: DiscreteParams,
                  seed=0) -> ScenePrep:
    """Voxel-downsample the scene and score uniform interest seeds by density."""
    cloud = voxel_downsample(scene.cloud, FIXED.scene_voxel)
    n = len(cloud)
    if n == 0:
        return ScenePrep(cloud, None, np.empty(0, dtype=np.int64), np.empty(0))
    tree = cKDTree(cloud.points)
    n_seeds = min(max(4 * dp.classified, 8), n)
    rng = derive_rng(seed, "seeds")
    seed_idx = rng.choice(n, size=n_seeds, replace=False)
    density = tree.query_ball_point(cloud.points[seed_idx], cp.cut_radius / 2,
                                    return_length=True).astype(np.float64)
    return ScenePrep(cloud, tree, seed_idx, density)


def _model_color(model: ObjectModel) -> np.ndarray | None:
    return None if model.cloud.colors is None else model.cloud.colors.mean(axis=0)


def _color_similarity(colors: np.ndarray | None, reference: np.ndarray | None) -> np.ndarray | float:
    if colors is None or reference is None:
        return 1.0
    return np.exp(-np.linalg.norm(np.atleast_2d(colors) - reference, axis=1) / COLOR_SIM_SCALE)


def candidates_from_prep(prep: ScenePrep, model: ObjectModel, cp: ContinuousParams,
                         dp: DiscreteParams, seed=0) -> list[PointCloud]:
    if prep.tree is None or len(prep.seed_indices) == 0:
        return []
    cloud = prep.cloud
    sim = _color_similarity(
        None if cloud.colors is None else cloud.colors[prep.seed_indices],
        _model_color(model))
    scores = (prep.seed_density / prep.seed_density.max()) * sim
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))

    centers: list[np.ndarray] = []
    candidates: list[PointCloud] = []
    for rank in order:
        if len(centers) >= dp.classified:
            break
        center = cloud.points[prep.seed_indices[rank]]
        if any(np.linalg.norm(center - c) < cp.cut_radius / 2 for c in centers):
            continue
        centers.append(center)
        idx = np.array(prep.tree.query_ball_point(center, cp.cut_radius), dtype=np.int64)
        if len(idx) < FIXED.min_points:
            continue
        if len(idx) > FIXED.input_points:
            rng = derive_rng(seed, "cand-sub", model.object_id, len(candidates))
            idx = idx[np.sort(rng.choice(len(idx), FIXED.input_points, replace=False))]
        candidates.append(cloud.select(np.sort(idx)))
    return candidates


def extract_candidates(scene: Scene, model: ObjectModel, cp: ContinuousParams,
                       dp: DiscreteParams, seed=0) -> list[PointCloud]:
    """Up to ``dp.classified`` local clouds of 512..2048 points around interest seeds."""
    return candidates_from_prep(prepare_scene(scene, cp, dp, seed), model, cp, dp, seed)


def _objectness(candidate: PointCloud, model: ObjectModel) -> float:
    size_factor = len(candidate) / FIXED.input_points
    extent = bbox_diagonal(candidate)
    geom = np.exp(-abs(extent - model.diagonal) / model.diagonal)
    color = _color_similarity(
        None if candidate.colors is None else candidate.colors.mean(axis=0, keepdims=True),
        _model_color(model))
    return float(size_factor * geom * np.atleast_1d(color)[0])


def rank_candidates(candidates: list[PointCloud], model: ObjectModel) -> list[PointCloud]:
    """Candidates sorted by descending objectness; ties keep extraction order."""
    scores = [_objectness(c, model) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    return [candidates[i] for i in order]


def generate_votes(candidate: PointCloud, model: ObjectModel, vote_threshold: float,
                   gt_pose: Pose, seed=0) -> Matches:
    """Match candidate points to nearest model keypoints under a jittered truth.

    Confidence decays with the match residual; votes below
    ``vote_threshold * max_confidence`` are dropped. Fewer than the pipeline
    minimum of surviving matches raises InsufficientMatches.
    """
    if not 0.0 < vote_threshold <= 1.0:
        raise ValueError("vote_threshold must lie in (0, 1]")
    rng = derive_rng(seed, "votes")
    jitter_rot = rotation_about_axis(rng.normal(size=3),
                                     np.deg2rad(rng.normal(0.0, VOTE_ROT_SIGMA_DEG)))
    jitter = Pose(jitter_rot @ gt_pose.rotation,
                  jitter_rot @ gt_pose.translation + rng.normal(0.0, VOTE_TRANS_SIGMA, 3))
    keypoints_world = jitter.apply(model.keypoints)
    dist, nearest = cKDTree(keypoints_world).query(candidate.points)
    confidence = np.exp(-dist / (VOTE_CONF_FRACTION * model.diagonal))
    keep = confidence >= vote_threshold * confidence.max()
    if keep.sum() < FIXED.min_matches:
        raise InsufficientMatches(
            f"{int(keep.sum())} matches below the minimum of {FIXED.min_matches}")
    return Matches(candidate.points[keep], model.keypoints[nearest[keep]],
                   confidence[keep])


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    u, _, vt = np.linalg.svd((src - cs).T @ (dst - cd))
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(rot, cd - rot @ cs)


def _batched_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transforms for (K, 3, 3) correspondence triples, vectorized."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    h = np.einsum("kni,knj->kij", src - cs, dst - cd)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    flip = np.repeat(np.eye(3)[None], len(src), axis=0)
    flip[:, 2, 2] = np.sign(np.linalg.det(v @ ut))
    rot = v @ flip @ ut
    trans = cd[:, 0] - np.einsum("kij,kj->ki", rot, cs[:, 0])
    return rot, trans


def ransac_pose(matches: Matches, ransac_dist: float, iterations: int,
                diagonal: float, seed=0) -> list[PoseHypothesis]:
    """Chunked RANSAC over the matches; one refined hypothesis per chunk of 50.

    The inlier distance is ``ransac_dist`` rescaled by diagonal/100. Each
    chunk's best 3-sample solution is refit on its inliers. Hypotheses come
    back sorted by inlier count. Collinear samples are redrawn.
    """
    if ransac_dist <= 0 or iterations < 1:
        raise ValueError("ransac_dist and iterations must be positive")
    n = len(matches)
    if n < 3:
        raise ValueError("need at least 3 matches")
    threshold_sq = (ransac_dist * diagonal / DIAGONAL_REF) ** 2
    src_all, dst_all = matches.model_points, matches.scene_points
    hypotheses: list[PoseHypothesis] = []
    chunk_starts = range(0, iterations, FIXED.ransac_chunk)
    for chunk_id, start in enumerate(chunk_starts):
        k = min(FIXED.ransac_chunk, iterations - start)
        rng = derive_rng(seed, "ransac", chunk_id)
        picks = rng.integers(0, n, size=(k, 3))
        src = src_all[picks]
        # duplicate indices and collinear triples give no stable pose; redraw
        for _ in range(4):
            area = np.linalg.norm(np.cross(src[:, 1] - src[:, 0],
                                           src[:, 2] - src[:, 0]), axis=1)
            bad = area < 1e-9 * diagonal * diagonal
            if not bad.any():
                break
            picks[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))
            src = src_all[picks]
        rot, trans = _batched_rigid(src, dst_all[picks])
        moved = np.einsum("kij,nj->kni", rot, src_all) + trans[:, None, :]
        moved -= dst_all[None]
        inliers = np.einsum("kni,kni->kn", moved, moved) < threshold_sq
        counts = inliers.sum(axis=1)
        best = int(np.argmax(counts))
        if counts[best] < 3:
            continue
        mask = inliers[best]
        pose = kabsch(src_all[mask], dst_all[mask])
        residual = pose.apply(src_all) - dst_all
        refined = np.einsum("ni,ni->n", residual, residual) < threshold_sq
        hypotheses.append(PoseHypothesis(pose, int(refined.sum())))
    hypotheses.sort(key=lambda h: -h.inlier_count)
    return hypotheses


def c2f_icp(hypothesis: PoseHypothesis, candidate: PointCloud, model: ObjectModel,
            icp_dist: float, icp_scale: float, icp_iters: int) -> PoseHypothesis:
    """Three-stage coarse-to-fine ICP against the candidate cloud.

    Stage k uses a correspondence cut-off of ``icp_dist * icp_scale**(2-k)``
    rescaled by diagonal/100, with the model at a 5 mm voxel grid. If no
    stage ever finds correspondences the input returns flagged "icp stalled".
    """
    if icp_dist <= 0 or icp_scale <= 0 or icp_iters < 1:
        raise ValueError("invalid ICP parameters")
    model_pts = voxel_downsample(model.cloud, FIXED.icp_model_voxel).points
    return _icp_refine(hypothesis, cKDTree(candidate.points), candidate.points,
                       model_pts, model.diagonal, icp_dist, icp_scale, icp_iters)


def _icp_refine(hypothesis: PoseHypothesis, tree: cKDTree, target: np.ndarray,
                model_pts: np.ndarray, diagonal: float, icp_dist: float,
                icp_scale: float, icp_iters: int) -> PoseHypothesis:
    pose = hypothesis.pose
    moved = False
    for stage in range(FIXED.icp_resolutions):
        cutoff = icp_dist * icp_scale ** (FIXED.icp_resolutions - 1 - stage) \
            * diagonal / DIAGONAL_REF
        for _ in range(icp_iters):
            dist, nearest = tree.query(pose.apply(model_pts))
            mask = dist < cutoff
            if mask.sum() < 3:
                break
            pose = kabsch(model_pts[mask], target[nearest[mask]])
            moved = True
    if not moved:
        return replace(hypothesis, flags=hypothesis.flags + ("icp stalled",))
    return replace(hypothesis, pose=pose)


def depth_check(hypothesis: PoseHypothesis, scene: Scene, model: ObjectModel,
                background_dist: float, accept_dist: float,
                cam: CameraIntrinsics | None = None) -> PoseHypothesis:
    """Score the hypothesis by rendered-depth agreement plus contour support.

    Rendered model pixels where the scene is closer by more than
    ``background_dist`` belong to foreground occluders and are excused.
    Among the rest, agreement counts pixels whose scene depth lies within
    ``accept_dist``, and pixels where the scene surface sits farther than
    the claimed model surface by more than ``background_dist`` contradict
    the hypothesis (the sensor saw through it) and count as violations.
    The contour term is the fraction of model silhouette pixels within
    2 px of a scene depth discontinuity. The final score is
    0.5*agreement*(1-violation) + 0.5*contour.
    """
    cam = cam or scene.cam
    model_depth = render_depth(hypothesis.pose.apply(model.cloud.points), cam)
    rendered = model_depth > 0
    if not rendered.any():
        return replace(hypothesis, depth_score=0.0)
    scene_depth = scene.depth
    valid = scene_depth > 0
    overlap = rendered & valid
    diff = scene_depth - model_depth
    foreground = overlap & (diff < -background_dist)
    considered = int(rendered.sum() - foreground.sum())
    if considered == 0:
        return replace(hypothesis, depth_score=0.0)
    agreement = float((overlap & (np.abs(diff) <= accept_dist)).sum()) / considered
    violation = float((overlap & (diff > background_dist)).sum()) / considered

    solid = ndimage.maximum_filter(rendered, size=3)
    silhouette = solid & ~ndimage.binary_erosion(solid)
    contour = 0.0
    if silhouette.any():
        contour = float(np.mean(_depth_edges(scene_depth)[silhouette]))
    score = float(np.clip(0.5 * agreement * (1.0 - violation) + 0.5 * contour, 0.0, 1.0))
    return replace(hypothesis, depth_score=score)


def _depth_edges(scene_depth: np.ndarray) -> np.ndarray:
    """Pixels within 2 px of a depth discontinuity or a data-validity border."""
    valid = scene_depth > 0
    dmax = ndimage.maximum_filter(np.where(valid, scene_depth, -np.inf), size=3)
    dmin = ndimage.minimum_filter(np.where(valid, scene_depth, np.inf), size=3)
    jump = np.isfinite(dmax) & np.isfinite(dmin) & (dmax - dmin > DEPTH_EDGE_JUMP)
    solid_valid = ndimage.maximum_filter(valid, size=3)
    border = solid_valid & ~ndimage.binary_erosion(solid_valid)
    return ndimage.maximum_filter(jump | border, size=5)


@dataclass(frozen=True)
class EstimateResult:
    """Outcome of one (scene, object) estimation with per-stage wall times."""

    found: bool
    hypothesis: PoseHypothesis | None
    timings: dict[str, float]
    reason: str = ""

    def to_dict(self) -> dict:
        data: dict = {"found": self.found, "timing": dict(self.timings)}
        if self.hypothesis is not None:
            data["pose"] = self.hypothesis.pose.to_dict()
            data["depth_score"] = self.hypothesis.depth_score
            data["inlier_count"] = self.hypothesis.inlier_count
        if self.reason:
            data["reason"] = self.reason
        return data


STAGE_KEYS = ("t_pre", "t_net", "t_ran", "t_icp", "t_depth")


def _estimate_prepared(prep: ScenePrep, scene: Scene, model: ObjectModel,
                       cp: ContinuousParams, dp: DiscreteParams, seed: int,
                       timings: dict[str, float]) -> EstimateResult:
    t0 = time.perf_counter()
    candidates = candidates_from_prep(prep, model, cp, dp, seed)
    ranked = rank_candidates(candidates, model)[:dp.estimated]
    gt_pose = scene.gt_poses.get(model.object_id)
    votes: list[Matches | None] = []
    for ci, candidate in enumerate(ranked):
        if gt_pose is None:
            votes.append(None)
            continue
        try:
            votes.append(generate_votes(candidate, model, cp.vote_threshold, gt_pose,
                                        seed=(seed, model.object_id, ci)))
        except InsufficientMatches:
            votes.append(None)
    timings["t_net"] += time.perf_counter() - t0

    best: PoseHypothesis | None = None
    model_icp = None
    for ci, (candidate, matches) in enumerate(zip(ranked, votes)):
        if matches is None:
            continue
        t0 = time.perf_counter()
        hypotheses = ransac_pose(matches, cp.ransac_dist, dp.ransac_iters,
                                 model.diagonal, seed=(seed, model.object_id, ci))
        timings["t_ran"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if model_icp is None:
            model_icp = voxel_downsample(model.cloud, FIXED.icp_model_voxel).points
        tree = cKDTree(candidate.points)
        refined = [_icp_refine(h, tree, candidate.points, model_icp, model.diagonal,
                               cp.icp_dist, cp.icp_scale, dp.icp_iters)
                   for h in hypotheses[:dp.depth_checked]]
        timings["t_icp"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        for hyp in refined:
            checked = depth_check(hyp, scene, model, cp.background_dist,
                                  cp.accept_dist, scene.cam)
            if best is None or checked.depth_score > best.depth_score:
                best = checked
        timings["t_depth"] += time.perf_counter() - t0

    if best is None:
        return EstimateResult(False, None, timings, reason="no detection")
    return EstimateResult(True, best, timings)


def estimate(scene: Scene, model: ObjectModel, cp: ContinuousParams,
             dp: DiscreteParams, seed=0) -> EstimateResult:
    """Full chain: candidates, ranking, votes, RANSAC, C2F-ICP, depth check."""
    timings = dict.fromkeys(STAGE_KEYS, 0.0)
    t0 = time.perf_counter()
    prep = prepare_scene(scene, cp, dp, seed)
    timings["t_pre"] = time.perf_counter() - t0
    return _estimate_prepared(prep, scene, model, cp, dp, seed, timings)


@dataclass(frozen=True)
class SceneEstimate:
    """Per-object results plus image-level stage times (preprocessing shared)."""

    results: dict[str, EstimateResult]
    timings: dict[str, float]

    @property
    def total_time(self) -> float:
        return float(sum(self.timings.values()))


def estimate_all(scene: Scene, models: list[ObjectModel], cp: ContinuousParams,
                 dp: DiscreteParams, seed=0) -> SceneEstimate:
    """Estimate every object in one scene, preprocessing the scene once."""
    image = dict.fromkeys(STAGE_KEYS, 0.0)
    t0 = time.perf_counter()
    prep = prepare_scene(scene, cp, dp, seed)
    image["t_pre"] = time.perf_counter() - t0
    results = {}
    for model in models:
        timings = dict.fromkeys(STAGE_KEYS, 0.0)
        results[model.object_id] = _estimate_prepared(prep, scene, model, cp, dp,
                                                      seed, timings)
        for key in STAGE_KEYS[1:]:
            image[key] += timings[key]
    return SceneEstimate(results, image)
