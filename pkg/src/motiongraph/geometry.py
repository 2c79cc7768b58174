"""Pinhole camera geometry, viewing rays, and pseudo-triangulation.

Conventions: camera pose is M = [R | -R C], so a world point X projects to
pixels through K [R | -R C] [X; 1]. Viewing rays start at the camera center
and carry unit direction vectors. Structure is an N x P grid of 3D points,
one shape row per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Camera",
    "Observation2D",
    "SceneObservations",
    "StructureMatrix",
    "ViewingRay",
    "Triangulation",
    "project",
    "viewing_ray",
    "point_to_ray_distance",
    "pseudo_triangulate",
    "initialize_structure",
    "initialize_structure_details",
]

_ROTATION_TOL = 1e-9
_UNIT_TOL = 1e-12
# |cos| above this counts as parallel; avoids cancellation in the 2x2 closest-point system
_PARALLEL_COS = 1.0 - 1e-9


def _float_array(values, shape, name):
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class Camera:
    """Calibrated camera with intrinsics K, rotation R and center C."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        k = _float_array(self.intrinsics, (3, 3), "intrinsics")
        r = _float_array(self.rotation, (3, 3), "rotation")
        c = _float_array(self.center, (3,), "center")
        if not (np.isfinite(k).all() and np.isfinite(r).all() and np.isfinite(c).all()):
            raise ValueError("camera parameters must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > _ROTATION_TOL:
            raise ValueError("rotation must be orthonormal")
        scale = max(1.0, float(np.abs(k).max()))
        if np.abs(k[np.tril_indices(3, -1)]).max() > 1e-9 * scale or (np.diag(k) <= 0).any():
            raise ValueError("intrinsics must be upper-triangular with a positive diagonal")
        for name, arr in (("intrinsics", k), ("rotation", r), ("center", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def pose(self) -> np.ndarray:
        """3x4 pose matrix [R | -R C]."""
        return np.hstack([self.rotation, -(self.rotation @ self.center)[:, None]])


@dataclass(frozen=True)
class ViewingRay:
    """Half-line from a camera center with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _float_array(self.origin, (3,), "origin")
        d = _float_array(self.direction, (3,), "direction")
        if not (np.isfinite(o).all() and np.isfinite(d).all()):
            raise ValueError("ray must be finite")
        if abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise ValueError("ray direction must be a unit vector")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, depth: float) -> np.ndarray:
        return self.origin + depth * self.direction


@dataclass(frozen=True)
class Observation2D:
    """A single 2D observation of point ``point_index`` in image ``image_index``."""

    image_index: int
    point_index: int
    pixel: np.ndarray
    present: bool = True

    def __post_init__(self):
        px = _float_array(self.pixel, (2,), "pixel")
        if self.present and not np.isfinite(px).all():
            raise ValueError("pixel must be finite when present")
        px.setflags(write=False)
        object.__setattr__(self, "pixel", px)


@dataclass
class SceneObservations:
    """Observations of up to P tracked points in N calibrated images.

    ``pixels`` is (N, P, 2) and only meaningful where ``present`` is True.
    ``stream_id``/``stream_index`` optionally record which capture stream an
    image belongs to and its order within that stream. Instances are treated
    as immutable once constructed.
    """

    cameras: list[Camera]
    pixels: np.ndarray
    present: np.ndarray
    stream_id: np.ndarray | None = None
    stream_index: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.cameras)
        self.pixels = np.array(self.pixels, dtype=float)
        self.present = np.array(self.present, dtype=bool)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 2 or self.pixels.shape[0] != n:
            raise ValueError("pixels must have shape (N, P, 2)")
        if self.present.shape != self.pixels.shape[:2]:
            raise ValueError("present mask must have shape (N, P)")
        if not self.present.any(axis=1).all():
            raise ValueError("every image needs at least one present observation")
        if not np.isfinite(self.pixels[self.present]).all():
            raise ValueError("present pixels must be finite")
        if (self.stream_id is None) != (self.stream_index is None):
            raise ValueError("stream_id and stream_index must be given together")
        if self.stream_id is not None:
            self.stream_id = np.array(self.stream_id, dtype=int)
            self.stream_index = np.array(self.stream_index, dtype=int)
            if self.stream_id.shape != (n,) or self.stream_index.shape != (n,):
                raise ValueError("stream metadata must be per-image")
            pairs = set(zip(self.stream_id.tolist(), self.stream_index.tolist()))
            if len(pairs) != n:
                raise ValueError("(stream_id, stream_index) pairs must be unique")

    @classmethod
    def from_observations(
        cls,
        cameras: list[Camera],
        observations: Sequence[Observation2D],
        n_points: int | None = None,
        stream_id=None,
        stream_index=None,
    ) -> "SceneObservations":
        n = len(cameras)
        p = 1 + max(o.point_index for o in observations) if n_points is None else n_points
        pixels = np.zeros((n, p, 2))
        present = np.zeros((n, p), dtype=bool)
        seen = set()
        for obs in observations:
            key = (obs.image_index, obs.point_index)
            if key in seen:
                raise ValueError(f"duplicate observation for image/point {key}")
            seen.add(key)
            if obs.present:
                pixels[key] = obs.pixel
                present[key] = True
        return cls(cameras, pixels, present, stream_id, stream_index)

    @property
    def n_images(self) -> int:
        return len(self.cameras)

    @property
    def n_points(self) -> int:
        return self.pixels.shape[1]

    @cached_property
    def centers(self) -> np.ndarray:
        """(N, 3) camera centers."""
        return np.array([cam.center for cam in self.cameras])

    @cached_property
    def ray_directions(self) -> np.ndarray:
        """(N, P, 3) unit ray directions; NaN where the observation is absent."""
        dirs = np.full((self.n_images, self.n_points, 3), np.nan)
        for n, cam in enumerate(self.cameras):
            mask = self.present[n]
            uv = self.pixels[n, mask]
            hom = np.column_stack([uv, np.ones(len(uv))])
            back = cam.rotation.T @ np.linalg.solve(cam.intrinsics, hom.T)
            back = back.T
            dirs[n, mask] = back / np.linalg.norm(back, axis=1, keepdims=True)
        return dirs

    def stream_groups(self) -> list[np.ndarray] | None:
        """Image indices per stream, ordered by stream_index; None without streams."""
        if self.stream_id is None:
            return None
        groups = []
        for sid in np.unique(self.stream_id):
            members = np.flatnonzero(self.stream_id == sid)
            order = np.argsort(self.stream_index[members], kind="stable")
            groups.append(members[order])
        return groups


@dataclass
class StructureMatrix:
    """N x P grid of 3D points; row n is the shape observed in image n."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError("points must have shape (N, P, 3)")
        if not np.isfinite(self.points).all():
            raise ValueError("structure entries must be finite")

    @property
    def n_images(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def as_rows(self) -> np.ndarray:
        """Flatten each shape to a 3P row vector, giving an (N, 3P) matrix."""
        return self.points.reshape(self.points.shape[0], -1)


def project(cam: Camera, point) -> np.ndarray:
    """Project a world point to pixel coordinates; raises if behind the camera."""
    x = _float_array(point, (3,), "point")
    y = cam.rotation @ (x - cam.center)
    if y[2] <= 1e-12:
        raise ValueError("point behind camera")
    h = cam.intrinsics @ y
    return h[:2] / h[2]


def viewing_ray(cam: Camera, pixel) -> ViewingRay:
    """Back-project a pixel into the unit viewing ray R^T K^-1 [u v 1]^T."""
    px = _float_array(pixel, (2,), "pixel")
    if not np.isfinite(px).all():
        raise ValueError("pixel must be finite")
    if np.linalg.cond(cam.intrinsics) > 1e12:
        raise ValueError("degenerate intrinsics")
    back = cam.rotation.T @ np.linalg.solve(cam.intrinsics, np.array([px[0], px[1], 1.0]))
    return ViewingRay(cam.center, back / np.linalg.norm(back))


def point_to_ray_distance(point, ray: ViewingRay) -> float:
    """Perpendicular distance of a 3D point to the infinite line through ``ray``."""
    v = _float_array(point, (3,), "point") - ray.origin
    return float(np.linalg.norm(np.cross(v, ray.direction)))


class Triangulation(NamedTuple):
    point: np.ndarray
    error: float
    degenerate: bool


def pseudo_triangulate(ray_a: ViewingRay, ray_b: ViewingRay) -> Triangulation:
    """Approximate intersection of two viewing rays.

    Returns the midpoint of the common-perpendicular segment between the two
    lines and the segment length as the error. Near-parallel rays are flagged
    degenerate; there the point is the projection of ``ray_b.origin`` onto
    ``ray_a`` and the error is the perpendicular inter-line distance.
    """
    da, db = ray_a.direction, ray_b.direction
    w = ray_b.origin - ray_a.origin
    c = float(da @ db)
    wa, wb = float(w @ da), float(w @ db)
    if abs(c) > _PARALLEL_COS:
        foot = ray_a.origin + wa * da
        return Triangulation(foot, float(np.linalg.norm(ray_b.origin - foot)), True)
    denom = 1.0 - c * c
    t = (wa - c * wb) / denom
    s = (c * wa - wb) / denom
    pa = ray_a.origin + t * da
    pb = ray_b.origin + s * db
    return Triangulation((pa + pb) / 2.0, float(np.linalg.norm(pa - pb)), False)


def _pair_triangulate(o_a, dirs_a, o_b, dirs_b):
    """Vectorized pseudo-triangulation of matched rays from two images."""
    w = o_b - o_a
    c = np.einsum("kd,kd->k", dirs_a, dirs_b)
    wa = dirs_a @ w
    wb = dirs_b @ w
    par = np.abs(c) > _PARALLEL_COS
    denom = np.where(par, 1.0, 1.0 - c * c)
    t = (wa - c * wb) / denom
    s = (c * wa - wb) / denom
    pa = o_a + t[:, None] * dirs_a
    pb = o_b + s[:, None] * dirs_b
    points = (pa + pb) / 2.0
    gaps = np.linalg.norm(pa - pb, axis=1)
    if par.any():
        foot = o_a + wa[par, None] * dirs_a[par]
        points[par] = foot
        gaps[par] = np.linalg.norm(o_b - foot, axis=1)
    return points, gaps


def initialize_structure_details(scene: SceneObservations):
    """Pseudo-triangulation initialization, also reporting fabricated entries.

    Each image is paired with the partner minimizing the summed
    pseudo-triangulation error over commonly observed points. Points missing
    from that partner fall back to the best-ranked partner observing them.
    Points observed in a single image are placed on their ray at the image's
    median triangulated depth and flagged; points observed nowhere fall back
    to the image centroid and are flagged.

    Returns (StructureMatrix, flags) with flags an (N, P) boolean grid of
    fabricated entries.
    """
    n_img, n_pts = scene.n_images, scene.n_points
    rays = scene.ray_directions
    centers = scene.centers
    present = scene.present

    pair_error = np.full((n_img, n_img), np.inf)
    for a in range(n_img):
        for b in range(a + 1, n_img):
            baseline = np.linalg.norm(centers[a] - centers[b])
            if baseline <= 1e-9 * (1.0 + np.linalg.norm(centers[a])):
                continue  # rays from a shared center always meet there; no depth info
            common = present[a] & present[b]
            if not common.any():
                continue
            _, gaps = _pair_triangulate(centers[a], rays[a, common], centers[b], rays[b, common])
            pair_error[a, b] = pair_error[b, a] = gaps.sum()

    ranking = [np.argsort(pair_error[a], kind="stable") for a in range(n_img)]
    points = np.zeros((n_img, n_pts, 3))
    flags = np.zeros((n_img, n_pts), dtype=bool)
    triangulated = np.zeros((n_img, n_pts), dtype=bool)

    for a in range(n_img):
        order = [m for m in ranking[a] if np.isfinite(pair_error[a, m])]
        if not order:
            raise ValueError(f"isolated image {a}: no co-observing partner")
        partner = order[0]
        common = present[a] & present[partner]
        pts, _ = _pair_triangulate(centers[a], rays[a, common], centers[partner], rays[partner, common])
        points[a, common] = pts
        triangulated[a, common] = True
        for p in np.flatnonzero(present[a] & ~common):
            for m in order[1:]:
                if present[m, p]:
                    tri = pseudo_triangulate(
                        ViewingRay(centers[a], rays[a, p]), ViewingRay(centers[m], rays[m, p])
                    )
                    points[a, p] = tri.point
                    triangulated[a, p] = True
                    break

    for a in range(n_img):
        lonely = np.flatnonzero(present[a] & ~triangulated[a])
        if lonely.size:
            own = np.flatnonzero(triangulated[a])
            depths = np.einsum("kd,kd->k", points[a, own] - centers[a], rays[a, own])
            for p in lonely:
                # observed only here: drop the point on its ray at the median scene depth
                points[a, p] = centers[a] + np.median(depths) * rays[a, p]
                flags[a, p] = True

    for a in range(n_img):
        order = [m for m in np.argsort(pair_error[a], kind="stable") if np.isfinite(pair_error[a, m])]
        for p in np.flatnonzero(~present[a]):
            for m in order:
                if present[m, p]:
                    points[a, p] = points[m, p]
                    break
            else:
                points[a, p] = points[a, present[a]].mean(axis=0)
                flags[a, p] = True

    return StructureMatrix(points), flags


def initialize_structure(scene: SceneObservations) -> StructureMatrix:
    """Two-view pseudo-triangulation initialization of the structure grid."""
    structure, _ = initialize_structure_details(scene)
    return structure
