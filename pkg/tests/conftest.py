import numpy as np
import pytest

from motiongraph.geometry import Camera, SceneObservations, StructureMatrix, project
from motiongraph.laplacian import DegreeMatrix, LaplaceFactors, WeightMatrix


def default_intrinsics(focal=1000.0, resolution=1000.0):
    return np.array([[focal, 0.0, resolution / 2], [0.0, focal, resolution / 2], [0.0, 0.0, 1.0]])


def look_at_camera(center, target=(0.0, 0.0, 0.0), focal=1000.0, resolution=1000.0):
    center = np.asarray(center, dtype=float)
    forward = np.asarray(target, dtype=float) - center
    forward = forward / np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ world_up) > 0.99:
        world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.vstack([right, down, forward])
    return Camera(default_intrinsics(focal, resolution), rotation, center)


def scene_from_trajectory(points, camera_indices, cameras, present=None, stream=True):
    """Project a ground-truth (N, P, 3) trajectory into a scene."""
    points = np.asarray(points, dtype=float)
    n, p = points.shape[:2]
    cam_list = [cameras[c] for c in camera_indices]
    pixels = np.zeros((n, p, 2))
    for i in range(n):
        for j in range(p):
            pixels[i, j] = project(cam_list[i], points[i, j])
    if present is None:
        present = np.ones((n, p), dtype=bool)
    sid = sidx = None
    if stream:
        cam_idx = np.asarray(camera_indices)
        sid = cam_idx.copy()
        sidx = np.zeros(n, dtype=int)
        for c in np.unique(cam_idx):
            members = np.flatnonzero(cam_idx == c)
            sidx[members] = np.arange(members.size)
    scene = SceneObservations(cam_list, pixels, present, sid, sidx)
    return scene, StructureMatrix(points)


def random_factors(n, rng):
    w = rng.random((n, n))
    np.fill_diagonal(w, 0.0)
    w /= w.sum(axis=1, keepdims=True)
    d = rng.random(n) + 0.1
    d /= d.sum()
    return LaplaceFactors(DegreeMatrix(d), WeightMatrix(w))


def chain_weights(n):
    w = np.zeros((n, n))
    w[0, 1] = 1.0
    w[n - 1, n - 2] = 1.0
    for i in range(1, n - 1):
        w[i, i - 1] = w[i, i + 1] = 0.5
    return w


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
