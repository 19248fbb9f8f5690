"""Built-in synthetic object models with analytic normals and symmetries."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ObjectModel, PointCloud, Pose, farthest_point_sample, rotation_about_axis

# Dense enough that splat renders stay solid at desk-scale depths.
SURFACE_SPACING = 1.4  # mm between sampled surface points


def _grid(a: float, b: float, spacing: float) -> np.ndarray:
    na = max(2, int(round(a / spacing)) + 1)
    nb = max(2, int(round(b / spacing)) + 1)
    u, v = np.meshgrid(np.linspace(-a / 2, a / 2, na), np.linspace(-b / 2, b / 2, nb))
    return np.column_stack([u.ravel(), v.ravel()])


def _box_surface(size, spacing: float = SURFACE_SPACING) -> tuple[np.ndarray, np.ndarray]:
    sx, sy, sz = size
    pts, nrm = [], []
    for axis, (da, db) in enumerate([(sy, sz), (sx, sz), (sx, sy)]):
        others = [a for a in range(3) if a != axis]
        uv = _grid(da, db, spacing)
        for sign in (-1.0, 1.0):
            face = np.zeros((len(uv), 3))
            face[:, axis] = sign * size[axis] / 2
            face[:, others[0]] = uv[:, 0]
            face[:, others[1]] = uv[:, 1]
            n = np.zeros((len(uv), 3))
            n[:, axis] = sign
            pts.append(face)
            nrm.append(n)
    return np.vstack(pts), np.vstack(nrm)


def make_box(object_id: str, size, color) -> ObjectModel:
    """Axis-aligned box surface centered at the origin."""
    pts, nrm = _box_surface(np.asarray(size, dtype=np.float64))
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(pts), 1))
    cloud = PointCloud(pts, nrm, colors)
    return ObjectModel.from_cloud(object_id, cloud)


def make_cylinder(object_id: str, radius: float, height: float, color,
                  symmetry_steps: int = 12) -> ObjectModel:
    """Upright cylinder with discrete rotational symmetry about its axis."""
    n_around = max(8, int(round(2 * np.pi * radius / SURFACE_SPACING)))
    n_along = max(2, int(round(height / SURFACE_SPACING)) + 1)
    theta = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    z = np.linspace(-height / 2, height / 2, n_along)
    tt, zz = np.meshgrid(theta, z)
    side = np.column_stack([radius * np.cos(tt).ravel(), radius * np.sin(tt).ravel(),
                            zz.ravel()])
    side_n = np.column_stack([np.cos(tt).ravel(), np.sin(tt).ravel(),
                              np.zeros(tt.size)])
    caps, caps_n = [], []
    for sign in (-1.0, 1.0):
        disc = _grid(2 * radius, 2 * radius, SURFACE_SPACING)
        disc = disc[np.linalg.norm(disc, axis=1) <= radius]
        cap = np.column_stack([disc, np.full(len(disc), sign * height / 2)])
        n = np.tile([0.0, 0.0, sign], (len(disc), 1))
        caps.append(cap)
        caps_n.append(n)
    pts = np.vstack([side, *caps])
    nrm = np.vstack([side_n, *caps_n])
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(pts), 1))
    cloud = PointCloud(pts, nrm, colors)
    symmetry = tuple(
        Pose(rotation_about_axis([0, 0, 1], 2 * np.pi * k / symmetry_steps), np.zeros(3))
        for k in range(1, symmetry_steps))
    return ObjectModel.from_cloud(object_id, cloud, symmetry)


def make_lshape(object_id: str, size, color) -> ObjectModel:
    """Two joined boxes forming an asymmetric L profile."""
    sx, sy, sz = np.asarray(size, dtype=np.float64)
    a_pts, a_nrm = _box_surface(np.array([sx, sy, sz / 2]))
    b_pts, b_nrm = _box_surface(np.array([sx / 2, sy, sz / 2]))
    a_pts = a_pts + [0.0, 0.0, -sz / 4]
    b_pts = b_pts + [-sx / 4, 0.0, sz / 4]
    pts = np.vstack([a_pts, b_pts])
    nrm = np.vstack([a_nrm, b_nrm])
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(pts), 1))
    cloud = PointCloud(pts, nrm, colors)
    return ObjectModel.from_cloud(object_id, cloud)


def make_object(spec: dict) -> ObjectModel:
    """Build a model from a config entry: builtin shape or JSON file path."""
    if "path" in spec:
        return load_object(spec["path"])
    shape = spec["shape"]
    object_id = spec["id"]
    color = spec.get("color", [0.7, 0.3, 0.3])
    if shape == "box":
        return make_box(object_id, spec.get("size", [40, 55, 75]), color)
    if shape == "cylinder":
        return make_cylinder(object_id, spec.get("radius", 25.0),
                             spec.get("height", 80.0), color)
    if shape == "lshape":
        return make_lshape(object_id, spec.get("size", [50, 40, 80]), color)
    raise ValueError(f"unknown shape {shape!r}")


def save_object(model: ObjectModel, path: str | Path) -> None:
    data = {
        "object_id": model.object_id,
        "cloud": json.loads(model.cloud.to_json()),
        "diagonal": model.diagonal,
        "keypoints": model.keypoints.tolist(),
        "symmetry": [p.to_dict() for p in model.symmetry],
    }
    Path(path).write_text(json.dumps(data, sort_keys=True))


def load_object(path: str | Path) -> ObjectModel:
    data = json.loads(Path(path).read_text())
    return ObjectModel(
        data["object_id"],
        PointCloud.from_json(json.dumps(data["cloud"])),
        float(data["diagonal"]),
        np.asarray(data["keypoints"], dtype=np.float64),
        tuple(Pose.from_dict(p) for p in data["symmetry"]),
    )
