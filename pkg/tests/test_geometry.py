import numpy as np
import pytest

from motiongraph.geometry import (
    Camera,
    SceneObservations,
    StructureMatrix,
    ViewingRay,
    initialize_structure,
    initialize_structure_details,
    point_to_ray_distance,
    project,
    pseudo_triangulate,
    viewing_ray,
)

from conftest import default_intrinsics, look_at_camera, scene_from_trajectory


def _simple_camera(rotation=None, center=(0.0, 0.0, 0.0)):
    rotation = np.eye(3) if rotation is None else rotation
    return Camera(default_intrinsics(), rotation, center)


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(ValueError, match="orthonormal"):
            Camera(default_intrinsics(), bad, np.zeros(3))

    def test_rejects_lower_triangular_intrinsics(self):
        k = default_intrinsics()
        k[1, 0] = 5.0
        with pytest.raises(ValueError, match="upper-triangular"):
            Camera(k, np.eye(3), np.zeros(3))

    def test_pose_matrix(self):
        cam = _simple_camera(center=(1.0, 2.0, 3.0))
        pose = cam.pose()
        assert np.allclose(pose[:, :3], np.eye(3))
        assert np.allclose(pose[:, 3], [-1.0, -2.0, -3.0])


class TestViewingRay:
    def test_principal_point_is_optical_axis(self):
        ray = viewing_ray(_simple_camera(), (500.0, 500.0))
        assert np.allclose(ray.direction, [0.0, 0.0, 1.0])
        assert np.allclose(ray.origin, 0.0)

    def test_off_axis_pixel(self):
        ray = viewing_ray(_simple_camera(), (1500.0, 500.0))
        expected = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
        assert np.allclose(ray.direction, expected)

    def test_rotated_camera_flips_axis(self):
        rot_y_180 = np.diag([-1.0, 1.0, -1.0])
        ray = viewing_ray(_simple_camera(rotation=rot_y_180), (500.0, 500.0))
        assert np.allclose(ray.direction, [0.0, 0.0, -1.0])

    def test_degenerate_intrinsics(self):
        k = np.diag([1.0, 1e-15, 1.0])
        cam = Camera(k, np.eye(3), np.zeros(3))
        with pytest.raises(ValueError, match="degenerate intrinsics"):
            viewing_ray(cam, (0.0, 0.0))

    def test_projection_ray_round_trip(self, rng):
        for _ in range(20):
            center = rng.normal(size=3) * 2.0
            cam = look_at_camera(center + np.array([0.0, 0.0, 5.0]))
            point = rng.normal(size=3)
            ray = viewing_ray(cam, project(cam, point))
            dist = point_to_ray_distance(point, ray)
            assert dist < 1e-8 * np.linalg.norm(point - cam.center)


class TestPointToRayDistance:
    def test_point_on_ray(self):
        ray = ViewingRay(np.array([1.0, 1.0, 1.0]), np.array([0.0, 1.0, 0.0]))
        assert point_to_ray_distance(ray.point_at(2.5), ray) == pytest.approx(0.0, abs=1e-12)

    def test_unit_offset(self):
        ray = ViewingRay(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert point_to_ray_distance(np.array([1.0, 0.0, 5.0]), ray) == pytest.approx(1.0)

    def test_matches_projection_residual_oracle(self, rng):
        for _ in range(50):
            origin = rng.normal(size=3)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            ray = ViewingRay(origin, direction)
            point = rng.normal(size=3) * 3.0
            v = point - origin
            expected = np.linalg.norm(v - (v @ direction) * direction)
            assert point_to_ray_distance(point, ray) == pytest.approx(expected, abs=1e-12)


class TestPseudoTriangulate:
    def test_intersecting_rays(self):
        target = np.array([1.0, 2.0, 3.0])
        a = ViewingRay(np.zeros(3), target / np.linalg.norm(target))
        offset = target - np.array([5.0, 0.0, 0.0])
        b = ViewingRay(np.array([5.0, 0.0, 0.0]), offset / np.linalg.norm(offset))
        tri = pseudo_triangulate(a, b)
        assert not tri.degenerate
        assert np.allclose(tri.point, target, atol=1e-9)
        assert tri.error == pytest.approx(0.0, abs=1e-9)

    def test_parallel_rays(self):
        d = np.array([0.0, 0.0, 1.0])
        tri = pseudo_triangulate(
            ViewingRay(np.zeros(3), d), ViewingRay(np.array([2.0, 0.0, 0.0]), d)
        )
        assert tri.degenerate
        assert tri.error == pytest.approx(2.0)

    def test_skew_rays_closed_form(self):
        a = ViewingRay(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        b = ViewingRay(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        tri = pseudo_triangulate(a, b)
        assert not tri.degenerate
        assert np.allclose(tri.point, [0.5, 0.0, 0.0])
        assert tri.error == pytest.approx(1.0)

    def test_symmetric_in_arguments(self, rng):
        for _ in range(30):
            rays = []
            for _ in range(2):
                d = rng.normal(size=3)
                rays.append(ViewingRay(rng.normal(size=3), d / np.linalg.norm(d)))
            ab = pseudo_triangulate(rays[0], rays[1])
            ba = pseudo_triangulate(rays[1], rays[0])
            if ab.degenerate:
                continue
            assert np.abs(ab.point - ba.point).max() < 1e-12 * (1 + np.abs(ab.point).max())
            assert ab.error == pytest.approx(ba.error, abs=1e-12)


def _static_scene(n_cameras=4, n_points=3):
    angles = np.linspace(0.0, 1.5 * np.pi, n_cameras, endpoint=False)
    cameras = [look_at_camera((3.0 * np.cos(a), 3.0 * np.sin(a), 1.0)) for a in angles]
    rng = np.random.default_rng(7)
    shape = rng.normal(size=(n_points, 3)) * 0.4
    points = np.repeat(shape[None, :, :], n_cameras, axis=0)
    return scene_from_trajectory(points, list(range(n_cameras)), cameras, stream=False)


class TestInitializeStructure:
    def test_exact_rays_recover_ground_truth(self):
        scene, truth = _static_scene()
        est = initialize_structure(scene)
        assert np.abs(est.points - truth.points).max() < 1e-6

    def test_wide_baseline_partner_beats_near_parallel(self):
        # camera 1 sits almost on top of camera 0 but shifted so its rays miss
        # the targets; camera 2 has a wide baseline and exact rays
        cam0 = look_at_camera((3.0, 0.0, 0.5))
        cam1 = look_at_camera((3.0, 0.02, 0.5), target=(0.0, 0.5, 0.0))
        cam2 = look_at_camera((0.0, 3.0, 0.5))
        rng = np.random.default_rng(3)
        shape = rng.normal(size=(3, 3)) * 0.3
        points = np.repeat(shape[None, :, :], 3, axis=0)
        scene, truth = scene_from_trajectory(points, [0, 1, 2], [cam0, cam1, cam2], stream=False)
        # corrupt camera-1 observations so the (0,1) pair has large gap errors
        pixels = scene.pixels.copy()
        pixels[1] += 80.0
        noisy = SceneObservations(scene.cameras, pixels, scene.present)
        est = initialize_structure(noisy)
        assert np.abs(est.points[0] - truth.points[0]).max() < 1e-6

    def test_missing_point_filled_from_second_best_partner(self):
        scene, truth = _static_scene(n_cameras=3)
        present = scene.present.copy()
        present[1, 0] = False  # partner of image 0 may lose point 0
        scene2 = SceneObservations(scene.cameras, scene.pixels, present)
        est = initialize_structure(scene2)
        assert np.abs(est.points[0] - truth.points[0]).max() < 1e-6

    def test_single_observer_point_flagged(self):
        scene, _ = _static_scene(n_cameras=3, n_points=3)
        present = scene.present.copy()
        present[1:, 2] = False  # point 2 only observed in image 0
        scene2 = SceneObservations(scene.cameras, scene.pixels, present)
        est, flags = initialize_structure_details(scene2)
        assert flags[0, 2]
        assert flags.sum() == 1  # images 1..2 copy a real estimate, not a fabricated one
        assert np.isfinite(est.points).all()

    def test_isolated_image_raises(self):
        cams = [look_at_camera((3.0, 0.0, 0.5)), look_at_camera((0.0, 3.0, 0.5))]
        points = np.zeros((2, 2, 3))
        points[:, 1] = [0.1, 0.2, 0.0]
        scene, _ = scene_from_trajectory(points, [0, 1], cams, stream=False)
        present = np.array([[True, False], [False, True]])
        scene2 = SceneObservations(scene.cameras, scene.pixels, present)
        with pytest.raises(ValueError, match="isolated image"):
            initialize_structure(scene2)

    def test_reordering_images_permutes_rows(self):
        scene, _ = _static_scene()
        base = initialize_structure(scene).points
        perm = np.array([2, 0, 3, 1])
        scene2 = SceneObservations(
            [scene.cameras[i] for i in perm], scene.pixels[perm], scene.present[perm]
        )
        permuted = initialize_structure(scene2).points
        assert np.allclose(permuted, base[perm], atol=1e-9)


class TestSceneValidation:
    def test_image_without_observations_rejected(self):
        cams = [look_at_camera((3.0, 0.0, 0.5)), look_at_camera((0.0, 3.0, 0.5))]
        pixels = np.zeros((2, 1, 2))
        present = np.array([[True], [False]])
        with pytest.raises(ValueError, match="at least one"):
            SceneObservations(cams, pixels, present)

    def test_duplicate_stream_pairs_rejected(self):
        cams = [look_at_camera((3.0, 0.0, 0.5)), look_at_camera((0.0, 3.0, 0.5))]
        pixels = np.full((2, 1, 2), 500.0)
        present = np.ones((2, 1), dtype=bool)
        with pytest.raises(ValueError, match="unique"):
            SceneObservations(cams, pixels, present, np.array([0, 0]), np.array([1, 1]))

    def test_structure_matrix_flattening(self):
        pts = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
        assert StructureMatrix(pts).as_rows().shape == (2, 6)
