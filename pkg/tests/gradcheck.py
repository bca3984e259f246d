"""
Central finite-difference checks of the analytic backward pass.

The test scene is built so the loss is smooth in every parameter:
multilinear fields are reproduced exactly by trilinear interpolation (no
slope kinks at cell faces), densities stay positive and colors inside
(0, 1) (ReLU and clamp inactive), cameras sit inside the bounds (no sample
ever enters the box) and the medium is thick enough that samples leaving
the box carry negligible weight.
"""

import numpy as np

from exblurf.camera import Intrinsics
from exblurf.render import RenderConfig, backward, render_blur_batch
from exblurf.se3 import log_map, subframe_times
from exblurf.synth import look_at
from exblurf.voxel import VoxelGrid

H = 1e-4
REL_TOL = 1e-3
# below this the finite difference is limited by loss roundoff (~1e-16 * |L| / h)
ABS_FLOOR = 1e-11
MIN_RELATIVE_MAGNITUDE = 1e-4
BOUND = 2.0


def _multilinear(rng, nodes, scale):
    u = nodes / BOUND
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    terms = [x, y, z, x * y, y * z, x * z, x * y * z]
    coeffs = rng.uniform(-scale, scale, len(terms))
    return sum(c * t for c, t in zip(coeffs, terms))


def smooth_grid(rng, dims=(16, 16, 16)):
    grid = VoxelGrid.create(dims, (-BOUND,) * 3, (BOUND,) * 3)
    nodes = grid.node_positions()
    grid.density[:] = 8.0 + _multilinear(rng, nodes, 0.8)
    for q in range(27):
        grid.sh[..., q] = 0.02 * _multilinear(rng, nodes, 1.0) + rng.uniform(-0.1, 0.1)
    return grid


def setup(rng, n_views=4, order=3, n_pixels=24, n_sub=5):
    k = Intrinsics(12.0, 12.0, 8.0, 8.0, 16, 16)
    controls = []
    for v in range(n_views):
        az = 0.6 * v - 0.9
        pose = look_at((1.2 * np.sin(az), -0.3, -1.2 * np.cos(az)))
        base = log_map(pose).vector
        controls.append(base + rng.normal(scale=[0.03] * 3 + [0.05] * 3, size=(order + 1, 6)))
    controls = np.array(controls)
    views = np.repeat(np.arange(n_views), n_pixels // n_views)
    pixels = rng.uniform(0, 15, (len(views), 2))
    weights = rng.normal(size=(len(views), 3))
    return controls, [k] * n_views, views, pixels, subframe_times(n_sub), weights


def loss(grid, controls, ks, views, pixels, times, weights):
    pred, _ = render_blur_batch(grid, controls, ks, views, pixels, times,
                                RenderConfig.oracle_mode())
    return float(np.sum(pred * weights))


def check_gradients(rng, n_density=100, n_sh=100):
    """
    Worst relative error per parameter kind, whether all checks pass, and how
    many entries passed only through the absolute roundoff floor.
    """
    grid = smooth_grid(rng)
    controls, ks, views, pixels, times, weights = setup(rng)
    _, ctx = render_blur_batch(grid, controls, ks, views, pixels, times,
                               RenderConfig.oracle_mode())
    grads = backward(weights, ctx)
    args = (ks, views, pixels, times, weights)

    def fd(bump):
        bump(+H)
        lp = loss(grid, controls, *args)
        bump(-2 * H)
        lm = loss(grid, controls, *args)
        bump(+H)
        return (lp - lm) / (2 * H)

    worst = {"density": 0.0, "sh": 0.0, "twist": 0.0}
    floored = 0
    ok = True

    def record(kind, a, n):
        nonlocal ok, floored
        err = abs(a - n)
        scale = max(abs(a), abs(n))
        rel = err / scale if scale > 0 else 0.0
        worst[kind] = max(worst[kind], rel)
        if rel >= REL_TOL:
            if err < ABS_FLOOR:
                floored += 1
            else:
                ok = False

    for kind, arr, g, count in (("density", grid.density, grads.density, n_density),
                                ("sh", grid.sh, grads.sh, n_sh)):
        # parameters that measurably influence the loss
        touched = np.argwhere(np.abs(g) > MIN_RELATIVE_MAGNITUDE * np.abs(g).max())
        for idx in map(tuple, touched[rng.choice(len(touched), count, replace=False)]):
            def bump(d, idx=idx, arr=arr):
                arr[idx] += d
            record(kind, g[idx], fd(bump))
    for idx in np.ndindex(controls.shape):
        def bump(d, idx=idx):
            controls[idx] += d
        record("twist", grads.controls[idx], fd(bump))
    return worst, ok, floored
