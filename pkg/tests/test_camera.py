import numpy as np
import pytest

from exblurf.camera import (Intrinsics, Ray, camera_directions, pixel_grid, ray_for_pixel,
                            rays_along_trajectory)
from exblurf.se3 import BezierTrajectory, Pose, Twist, exp_map, init_trajectory


@pytest.fixture
def k():
    return Intrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)


def test_center_pixel_looks_forward(k):
    ray = ray_for_pixel(k, Pose.identity(), (49.5, 39.5))
    assert np.allclose(ray.direction, [0, 0, 1], atol=1e-15)
    assert np.array_equal(ray.origin, np.zeros(3))


def test_directions_are_unit_and_signs(k):
    d = camera_directions(k, pixel_grid(k))
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-15)
    top_left = camera_directions(k, np.array([[0, 0]]))[0]
    assert top_left[0] < 0 and top_left[1] < 0 and top_left[2] > 0


def test_pose_rotates_direction(k):
    pose = exp_map(Twist([0, np.pi / 2, 0], [1, 2, 3]))
    ray = ray_for_pixel(k, pose, (49.5, 39.5))
    assert np.allclose(ray.direction, [1, 0, 0], atol=1e-15)
    assert np.allclose(ray.origin, pose.translation)


def test_out_of_bounds_pixel(k):
    with pytest.raises(ValueError):
        ray_for_pixel(k, Pose.identity(), (100, 0))
    with pytest.raises(ValueError):
        ray_for_pixel(k, Pose.identity(), (-0.1, 0))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)
    k = Intrinsics(1.0, 2.0, 1.5, 1.0, 4, 4)
    assert Intrinsics.from_dict(k.to_dict()) == k


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), [1.0, 1.0, 0.0])


def test_pixel_grid_row_major(k):
    g = pixel_grid(k)
    assert g.shape == (k.width * k.height, 2)
    assert tuple(g[1]) == (1, 0) and tuple(g[k.width]) == (0, 1)


def test_rays_along_constant_trajectory(k):
    traj = init_trajectory(exp_map(Twist([0.1, 0.2, 0.3], [1, 0, 0])), 3)
    rays = rays_along_trajectory(k, traj, (10, 20), 5)
    assert len(rays) == 5
    for r in rays[1:]:
        assert np.allclose(r.origin, rays[0].origin, atol=1e-15)
        assert np.allclose(r.direction, rays[0].direction, atol=1e-15)
