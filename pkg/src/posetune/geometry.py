"""Point-cloud and rigid-transform primitives. All distances are millimeters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ROTATION_TOL = 1e-9
NORMAL_TOL = 1e-6


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``p -> rotation @ p + translation`` (translation in mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(np.asarray(self.rotation).reshape(3, 3)))
        object.__setattr__(self, "translation", _freeze(np.asarray(self.translation).reshape(3)))
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {det} != +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose equivalent to applying ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(data: dict) -> "Pose":
        return Pose(np.array(data["rotation"], dtype=np.float64).reshape(3, 3),
                    np.array(data["translation"], dtype=np.float64))


def rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` (need not be unit length)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (via normalized quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class PointCloud:
    """Positions plus optional per-point normal and RGB channels.

    Channels that are present must have one row per point; normals are unit
    length, colors lie in [0, 1].
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _freeze(pts))
        n = len(pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != n:
                raise ValueError(f"normals has {len(nrm)} rows, expected {n}")
            lengths = np.linalg.norm(nrm, axis=1)
            if n and np.abs(lengths - 1.0).max() > NORMAL_TOL:
                raise ValueError("normals are not unit length")
            object.__setattr__(self, "normals", _freeze(nrm))
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(col) != n:
                raise ValueError(f"colors has {len(col)} rows, expected {n}")
            if n and (col.min() < 0.0 or col.max() > 1.0):
                raise ValueError("colors outside [0, 1]")
            object.__setattr__(self, "colors", _freeze(col))

    def __len__(self) -> int:
        return len(self.points)

    def select(self, indices) -> "PointCloud":
        """Sub-cloud at the given row indices (channels follow)."""
        return PointCloud(
            self.points[indices],
            None if self.normals is None else self.normals[indices],
            None if self.colors is None else self.colors[indices],
        )

    def to_json(self) -> str:
        data = {"points": self.points.tolist()}
        if self.normals is not None:
            data["normals"] = self.normals.tolist()
        if self.colors is not None:
            data["colors"] = self.colors.tolist()
        return json.dumps(data, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "PointCloud":
        data = json.loads(text)
        arrays = {}
        for key in ("points", "normals", "colors"):
            if key in data and data[key] is not None:
                arr = np.asarray(data[key], dtype=np.float64)
                if arr.size and not np.isfinite(arr).all():
                    raise ValueError(f"{key} contains NaN or Inf")
                arrays[key] = arr
        if "points" not in arrays:
            raise ValueError("missing 'points'")
        return PointCloud(arrays["points"], arrays.get("normals"), arrays.get("colors"))


@dataclass(frozen=True)
class ObjectModel:
    """Object reference cloud with matching keypoints and symmetry set.

    ``symmetry`` holds the object's discrete symmetry transforms (identity
    excluded); empty means no symmetry.
    """

    object_id: str
    cloud: PointCloud
    diagonal: float
    keypoints: np.ndarray
    symmetry: tuple[Pose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.diagonal <= 0:
            raise ValueError("diagonal must be positive")
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if len(kp) > 100:
            raise ValueError(f"{len(kp)} keypoints exceeds the 100-point cap")
        object.__setattr__(self, "keypoints", _freeze(kp))
        object.__setattr__(self, "symmetry", tuple(self.symmetry))

    @property
    def is_symmetric(self) -> bool:
        return len(self.symmetry) > 0

    @staticmethod
    def from_cloud(object_id: str, cloud: PointCloud,
                   symmetry: tuple[Pose, ...] = (), max_keypoints: int = 100) -> "ObjectModel":
        """Build a model from a cloud; keypoints by farthest-point sampling."""
        return ObjectModel(object_id, cloud, bbox_diagonal(cloud),
                           farthest_point_sample(cloud.points, max_keypoints), symmetry)


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point subset of at most ``count`` points (start: point 0)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= count:
        return pts.copy()
    chosen = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return pts[chosen]


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply a rigid transform: rotate+translate points, rotate normals."""
    return PointCloud(
        pose.apply(cloud.points),
        None if cloud.normals is None else cloud.normals @ pose.rotation.T,
        cloud.colors,
    )


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel: the centroid of that voxel's points.

    Voxel keys are ``floor(coordinate / voxel)`` per axis. Averaged normals are
    renormalized; averaged colors stay in range by convexity.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    k = len(counts)

    def bucket_mean(values: np.ndarray) -> np.ndarray:
        acc = np.zeros((k, values.shape[1]))
        np.add.at(acc, inverse, values)
        return acc / counts[:, None]

    points = bucket_mean(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = bucket_mean(cloud.normals)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        lengths[lengths == 0] = 1.0
        normals /= lengths
    colors = None if cloud.colors is None else bucket_mean(cloud.colors)
    return PointCloud(points, normals, colors)


def estimate_normals(cloud: PointCloud, radius: float) -> PointCloud:
    """Covariance-based normals from neighbors within ``radius``.

    Each normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, flipped to face the sensor at the origin (scene extends along
    +z). A point with fewer than 3 neighbors falls back to the direction
    toward the sensor.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = cloud.points
    n = len(pts)
    if n == 0:
        return PointCloud(pts, np.zeros((0, 3)), cloud.colors)
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, radius)
    normals = np.empty((n, 3))
    for i, idx in enumerate(neighborhoods):
        if len(idx) < 3:
            normals[i] = _toward_sensor(pts[i])
            continue
        local = pts[idx]
        cov = np.cov(local.T)
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        # eigh can return a degenerate direction for exactly collinear points
        if not np.isfinite(normal).all():
            normals[i] = _toward_sensor(pts[i])
            continue
        if normal @ pts[i] > 0:
            normal = -normal
        normals[i] = normal / np.linalg.norm(normal)
    return PointCloud(pts, normals, cloud.colors)


def _toward_sensor(point: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(point)
    if norm == 0:
        return np.array([0.0, 0.0, -1.0])
    return -point / norm


def bbox_diagonal(cloud: PointCloud) -> float:
    """Axis-aligned bounding-box diagonal length."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    extent = cloud.points.max(axis=0) - cloud.points.min(axis=0)
    return float(np.linalg.norm(extent))
