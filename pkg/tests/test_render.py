import numpy as np
import pytest

from conftest import random_grid, random_unit
from gradcheck import check_gradients, setup, smooth_grid
from exblurf.camera import Intrinsics, Ray
from exblurf.errors import StateError
from exblurf.render import (RenderConfig, backward, march, render_blur_batch, render_blurred_pixel,
                            render_image, render_ray, render_rays)
from exblurf.se3 import BezierTrajectory, Pose, Twist, exp_map, init_trajectory
from exblurf.synth import oracle_render_rays
from exblurf.voxel import SH_C0, VoxelGrid


def two_sample_grid():
    grid = VoxelGrid.create((2, 2, 2), (0, 0, 0), (1, 1, 1), init_density=0.0)
    x = grid.node_positions()[..., 0]
    grid.density[:] = 0.5 + 2.0 * x
    grid.sh[..., 0] = (1.5 - 2.0 * x - 0.5) / SH_C0
    grid.sh[..., 9] = (-0.5 + 2.0 * x - 0.5) / SH_C0
    grid.sh[..., 18] = -0.5 / SH_C0
    return grid


def test_two_sample_hand_case():
    grid = two_sample_grid()
    cfg = RenderConfig.oracle_mode(step_ratio=1.0)
    ray = Ray([0.0, 0.3, 0.3], [1.0, 0.0, 0.0])
    samples = march(grid, ray, cfg)
    assert samples.count == 2 and np.allclose(samples.spacings, 0.5)
    res = render_ray(grid, ray, cfg)
    w1 = 1 - np.exp(-0.5)
    w2 = np.exp(-0.5) * (1 - np.exp(-1.0))
    assert np.allclose(res.weights, [w1, w2], atol=1e-12)
    assert np.allclose(res.rgb, [w1, w2, 0.0], atol=1e-12)
    assert res.final_transmittance == pytest.approx(np.exp(-1.5), abs=1e-12)


def test_march_examples():
    grid = VoxelGrid.create((2, 2, 2), (0, 0, 0), (1, 1, 1))
    cfg = RenderConfig()
    s = march(grid, Ray([-1.0, 0.5, 0.5], [1.0, 0, 0]), cfg)
    assert s.count == 4 and np.allclose(s.spacings, 0.25)
    assert np.all(np.diff(s.distances) > 0)
    assert march(grid, Ray([-1.0, 2.0, 0.5], [1.0, 0, 0]), cfg).count == 0
    half = march(grid, Ray([-1.0, 0.5, 0.5], [1.0, 0, 0]), RenderConfig(step_ratio=0.25))
    assert abs(half.count - 2 * s.count) <= 1


def test_march_skips_pruned_cells():
    grid = VoxelGrid.create((4, 4, 4), (0, 0, 0), (1, 1, 1))
    grid.occupancy[:] = False
    assert march(grid, Ray([-1.0, 0.5, 0.5], [1.0, 0, 0])).count == 0


def test_empty_space_and_background():
    grid = VoxelGrid.create((4, 4, 4), (-1, -1, -1), (1, 1, 1), init_density=0.0)
    res = render_ray(grid, Ray([0, 0, -3.0], [0, 0, 1.0]))
    assert np.array_equal(res.rgb, np.zeros(3)) and res.final_transmittance == 1.0
    k = Intrinsics(4.0, 4.0, 4.0, 4.0, 8, 8)
    white = RenderConfig(background=(1.0, 1.0, 1.0))
    img = render_image(grid, Pose(np.eye(3), [0, 0, -3.0]), k, white)
    assert np.array_equal(img, np.ones((8, 8, 3)))


def test_opaque_limit():
    grid = VoxelGrid.create((2, 2, 2), (0, 0, 0), (1, 1, 1), init_density=1e6)
    grid.sh[..., 0] = 0.3 / SH_C0
    res = render_ray(grid, Ray([0.0, 0.5, 0.5], [1.0, 0, 0]), RenderConfig.oracle_mode())
    assert np.allclose(res.rgb, [0.8, 0.5, 0.5], atol=1e-12)


def test_weights_normalize_and_transmittance_monotone(rng):
    grid = random_grid(rng)
    o = rng.uniform(-2, 2, (200, 3))
    d = random_unit(rng, 200)
    for oi, di in zip(o, d):
        res = render_ray(grid, Ray(oi, di), RenderConfig.oracle_mode())
        assert abs(res.weights.sum() + res.final_transmittance - 1) < 1e-6
        assert np.all(res.weights >= 0)


def test_oracle_equivalence_and_early_termination(rng):
    grid = random_grid(rng)
    o = rng.uniform(-2, 2, (300, 3))
    d = random_unit(rng, 300)
    exact = render_rays(grid, o, d, RenderConfig.oracle_mode())[0]
    ref = oracle_render_rays(grid, o, d, RenderConfig().step(grid))
    assert np.max(np.abs(exact - ref)) < 1e-6
    fast = render_rays(grid, o, d, RenderConfig())[0]
    assert np.max(np.abs(fast - exact)) < 1e-3


def test_render_image_matches_oracle(rng):
    grid = random_grid(rng)
    k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    pose = exp_map(Twist([0.1, -0.2, 0.05], [0.2, 0.1, -2.5]))
    img = render_image(grid, pose, k, RenderConfig.oracle_mode())
    from exblurf.camera import camera_directions, pixel_grid
    dirs = camera_directions(k, pixel_grid(k)) @ pose.rotation.T
    ref = oracle_render_rays(grid, np.broadcast_to(pose.translation, dirs.shape), dirs,
                             RenderConfig().step(grid)).reshape(8, 8, 3)
    assert np.max(np.abs(img - ref)) < 1e-6
    assert np.array_equal(img, render_image(grid, pose, k, RenderConfig.oracle_mode()))


def test_blurred_pixel_constant_trajectory(rng):
    grid = random_grid(rng)
    k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    pose = exp_map(Twist([0.1, -0.2, 0.05], [0.2, 0.1, -2.5]))
    traj = init_trajectory(pose, 3)
    from exblurf.camera import ray_for_pixel
    ref = render_ray(grid, ray_for_pixel(k, pose, (3, 5))).rgb
    for n in (2, 5, 11):
        assert np.allclose(render_blurred_pixel(grid, traj, k, (3, 5), n), ref, atol=1e-15)
    with pytest.raises(ValueError):
        render_blurred_pixel(grid, traj, k, (3, 5), 1)


def test_blurred_pixel_uniform_fog():
    grid = VoxelGrid.create((4, 4, 4), (-5, -5, -5), (5, 5, 5), init_density=50.0)
    grid.sh[..., ::9] = (np.array([0.2, 0.7, 0.4]) - 0.5) / SH_C0
    k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    controls = np.array([[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.2, 0.1, 0.0, 0.3, 0.0, 0.1]])
    out = render_blurred_pixel(grid, BezierTrajectory.from_array(controls), k, (2, 2), 4,
                               RenderConfig.oracle_mode())
    assert np.allclose(out, [0.2, 0.7, 0.4], atol=1e-9)


def test_blur_two_pose_mean():
    # left half red, right half green; a linear trajectory jumps across
    grid = VoxelGrid.create((4, 4, 4), (-1, -1, -1), (1, 1, 1), init_density=1e4)
    x = grid.node_positions()[..., 0]
    grid.sh[..., 0] = np.where(x < 0, 0.5, -0.5) / SH_C0
    grid.sh[..., 9] = np.where(x < 0, -0.5, 0.5) / SH_C0
    grid.sh[..., 18] = -0.5 / SH_C0
    k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    controls = np.array([[0, 0, 0, -0.75, 0, -3.0], [0, 0, 0, 0.75, 0, -3.0]])
    out = render_blurred_pixel(grid, BezierTrajectory.from_array(controls), k, (3.5, 3.5), 2,
                               RenderConfig.oracle_mode())
    assert np.allclose(out, [0.5, 0.5, 0.0], atol=1e-12)


def test_backward_requires_context():
    with pytest.raises(StateError):
        backward(np.zeros((1, 3)), None)


def test_zero_upstream_gradient(rng):
    grid = smooth_grid(rng)
    controls, ks, views, pixels, times, _ = setup(rng)
    _, ctx = render_blur_batch(grid, controls, ks, views, pixels, times)
    g = backward(np.zeros((len(views), 3)), ctx)
    assert not g.density.any() and not g.sh.any() and not g.controls.any()


def test_sh_gradient_single_opaque_sample():
    grid = VoxelGrid.create((2, 2, 2), (0, 0, 0), (1, 1, 1), init_density=1e4)
    grid.sh[..., 0] = 0.1
    k = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    controls = np.tile([0.0, 0.0, 0.0, 0.5, 0.5, -1.0], (2, 1))[None]
    cfg = RenderConfig.oracle_mode()
    _, ctx = render_blur_batch(grid, controls, [k], np.array([0]), np.array([[0.0, 0.0]]),
                               np.array([0.0, 1.0]), cfg)
    upstream = np.array([[1.0, 0.0, 0.0]])
    g = backward(upstream, ctx)
    # first sample absorbs everything: weight ~1; its 8 corners share trilinear weights
    assert g.sh[..., 0].sum() == pytest.approx(SH_C0, rel=1e-6)
    assert np.all(g.sh[..., 9:] == 0)


def test_gradients_match_finite_differences():
    worst, ok, _ = check_gradients(np.random.default_rng(7), n_density=30, n_sh=30)
    assert ok, worst
