import numpy as np
import pytest

from st2dgs.cameras import Camera, look_at
from st2dgs.errors import BadCameraMatrix


def simple_camera(width=8, height=6, c2w=None):
    if c2w is None:
        c2w = np.eye(4)
    return Camera(fx=40.0, fy=50.0, cx=width / 2, cy=height / 2,
                  width=width, height=height, camera_to_world=np.asarray(c2w, float))


class TestCameraBasics:
    def test_identity_pose_round_trip(self):
        cam = simple_camera()
        pts = np.array([[0.5, -0.25, 3.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(cam.to_camera(pts), pts, atol=1e-12)
        w2c = cam.world_to_camera
        np.testing.assert_allclose(w2c @ cam.camera_to_world, np.eye(4), atol=1e-12)

    def test_projection_pinhole(self):
        cam = simple_camera()
        # point at (x, y, z) lands on (fx*x/z + cx, fy*y/z + cy)
        px = cam.project(np.array([[1.0, 2.0, 4.0]]))
        np.testing.assert_allclose(px, [[40.0 * 0.25 + 4.0, 50.0 * 0.5 + 3.0]], atol=1e-12)

    def test_pixel_ray_hits_pixel_center(self):
        cam = simple_camera()
        origin, direction = cam.pixel_ray(2, 3)
        np.testing.assert_allclose(origin, [0, 0, 0], atol=1e-15)
        # walk along the ray and project back
        p = origin + direction * 5.0
        back = cam.project(p[None])
        np.testing.assert_allclose(back, [[2.5, 3.5]], atol=1e-9)

    def test_ray_grid_matches_pixel_ray(self):
        cam = simple_camera(width=4, height=3)
        grid = cam.ray_grid()
        assert grid.shape == (3, 4, 3)
        for py in range(3):
            for px in range(4):
                _, d = cam.pixel_ray(px, py)
                np.testing.assert_allclose(grid[py, px], d, atol=1e-12)
                assert np.linalg.norm(grid[py, px]) == pytest.approx(1.0, abs=1e-12)

    def test_bad_rotation_rejected(self):
        c2w = np.eye(4)
        c2w[0, 0] = 1.1
        with pytest.raises(BadCameraMatrix):
            simple_camera(c2w=c2w)

    def test_bad_focal_rejected(self):
        with pytest.raises(BadCameraMatrix):
            Camera(fx=-1.0, fy=1.0, cx=0, cy=0, width=2, height=2,
                   camera_to_world=np.eye(4))

    def test_resized_scales_intrinsics(self):
        cam = simple_camera(width=8, height=6)
        half = cam.resized(4, 3)
        assert half.fx == pytest.approx(20.0)
        assert half.fy == pytest.approx(25.0)
        assert half.cx == pytest.approx(2.0)
        assert (half.width, half.height) == (4, 3)


class TestLookAt:
    def test_frame_is_right_handed(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            eye = rng.normal(size=3)
            target = rng.normal(size=3)
            if np.linalg.norm(target - eye) < 1e-3:
                continue
            c2w = look_at(eye, target)
            r = c2w[:3, :3]
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-10)
            np.testing.assert_allclose(c2w[:3, 3], eye, atol=1e-12)

    def test_forward_points_at_target(self):
        eye = np.array([1.0, 2.0, -3.0])
        target = np.array([0.0, 0.5, 4.0])
        c2w = look_at(eye, target)
        fwd = c2w[:3, 2]
        expected = (target - eye) / np.linalg.norm(target - eye)
        np.testing.assert_allclose(fwd, expected, atol=1e-12)

    def test_camera_sees_target_at_center(self):
        eye = np.array([2.0, -1.0, 0.5])
        target = np.array([-0.5, 0.25, 3.0])
        cam = Camera(fx=100, fy=100, cx=32, cy=24, width=64, height=48,
                     camera_to_world=look_at(eye, target))
        np.testing.assert_allclose(cam.project(target[None]), [[32, 24]], atol=1e-9)

    def test_up_keeps_image_upright(self):
        # y-down convention: world +y maps to a negative image-y direction
        c2w = look_at(np.array([0.0, 0.0, -5.0]), np.zeros(3), up=np.array([0.0, 1.0, 0.0]))
        down = c2w[:3, 1]
        assert down[1] < -0.99
