"""
Volume rendering over the voxel grid, blur composition along camera
trajectories, and the analytic backward pass.

Gradients with respect to a sub-frame pose flow through the ray origin and
direction only; sample distances along a ray are fixed multiples of the
step, so they carry no pose dependence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import Intrinsics, Ray, camera_directions, pixel_grid, rays_along_trajectory
from .errors import StateError
from .se3 import (BezierTrajectory, Pose, bernstein_matrix, blend_twists, exp_map_batch,
                  se3_left_jacobian_batch, subframe_times)
from .voxel import VoxelGrid

EARLY_STOP_TRANSMITTANCE = 1e-4


@dataclass(frozen=True)
class RenderConfig:
    step_ratio: float = 0.5
    background: tuple = (0.0, 0.0, 0.0)
    early_termination: bool = True
    jitter: bool = False

    @classmethod
    def oracle_mode(cls, **kw) -> "RenderConfig":
        return cls(early_termination=False, jitter=False, **kw)

    def step(self, grid: VoxelGrid) -> float:
        return float(np.min(grid.voxel_size)) * self.step_ratio

    @property
    def term_thresh(self) -> float:
        return EARLY_STOP_TRANSMITTANCE if self.early_termination else 0.0


@dataclass
class RaySampleSet:
    positions: np.ndarray
    spacings: np.ndarray
    distances: np.ndarray

    @property
    def count(self) -> int:
        return len(self.spacings)


@dataclass
class RenderResult:
    rgb: np.ndarray
    final_transmittance: float
    weights: np.ndarray


@dataclass
class GradientBuffer:
    density: np.ndarray
    sh: np.ndarray
    controls: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, grid: VoxelGrid, controls_shape=None) -> "GradientBuffer":
        return cls(np.zeros(grid.dims), np.zeros(grid.sh.shape),
                   None if controls_shape is None else np.zeros(controls_shape))


def _grid_args(grid: VoxelGrid):
    return (grid.density, grid.sh, grid.occupancy, grid.bounds_min, grid.bounds_max,
            grid.voxel_size)


def _offsets(n_rays: int, cfg: RenderConfig, rng) -> np.ndarray:
    if cfg.jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        return rng.random(n_rays)
    return np.full(n_rays, 0.5)


def march(grid: VoxelGrid, ray: Ray, cfg: RenderConfig = RenderConfig()) -> RaySampleSet:
    """Lattice samples of one ray inside the bounds, minus fully pruned cells."""
    step = cfg.step(grid)
    t0, t1 = _kernels.ray_interval(ray.origin, ray.direction, grid.bounds_min, grid.bounds_max)
    k0, k1 = _kernels.sample_range(t0, t1, step, 0.5)
    dist = (np.arange(k0, k1) + 0.5) * step
    pos = ray.origin + dist[:, None] * ray.direction
    inside = np.all((pos >= grid.bounds_min) & (pos <= grid.bounds_max), axis=-1)
    u = (pos - grid.bounds_min) / grid.voxel_size
    i0 = np.clip(np.floor(u).astype(np.int64), 0, np.array(grid.dims) - 2)
    live = np.zeros(len(dist), dtype=bool)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        live |= grid.occupancy[tuple((i0 + offs).T)]
    keep = inside & live
    return RaySampleSet(pos[keep], np.full(int(keep.sum()), step), dist[keep])


def render_rays(grid: VoxelGrid, origins: np.ndarray, dirs: np.ndarray,
                cfg: RenderConfig = RenderConfig(), offsets=None, rng=None,
                max_weights: int = 0):
    """Render many rays; returns (rgb, final transmittance, sample counts, sparsity sums[, weights])."""
    origins = np.ascontiguousarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
    n = len(origins)
    if offsets is None:
        offsets = _offsets(n, cfg, rng)
    rgb = np.empty((n, 3))
    t_final = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    sparse = np.empty(n)
    weights = np.zeros((n, max_weights))
    _kernels.render_forward(*_grid_args(grid), origins, dirs, offsets, cfg.step(grid),
                            cfg.term_thresh, np.asarray(cfg.background, float),
                            rgb, t_final, counts, sparse, weights)
    if max_weights:
        return rgb, t_final, counts, sparse, weights
    return rgb, t_final, counts, sparse


def render_ray(grid: VoxelGrid, ray: Ray, cfg: RenderConfig = RenderConfig()) -> RenderResult:
    cap = march(grid, ray, cfg).count
    rgb, t_final, counts, _, weights = render_rays(
        grid, ray.origin[None], ray.direction[None], cfg, max_weights=max(cap, 1))
    return RenderResult(rgb[0], float(t_final[0]), weights[0, :counts[0]])


def render_blurred_pixel(grid: VoxelGrid, traj: BezierTrajectory, k: Intrinsics, x, n: int,
                         cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Unweighted mean of the sub-frame ray colors."""
    if n < 2:
        raise ValueError("blur composition needs n >= 2 sub-frames")
    rays = rays_along_trajectory(k, traj, x, n)
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    rgb = render_rays(grid, origins, dirs, cfg)[0]
    return rgb.mean(axis=0)


def render_image(grid: VoxelGrid, pose: Pose, k: Intrinsics,
                 cfg: RenderConfig = RenderConfig(), rng=None) -> np.ndarray:
    dirs = camera_directions(k, pixel_grid(k)) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    rgb = render_rays(grid, origins, dirs, cfg, rng=rng)[0]
    return rgb.reshape(k.height, k.width, 3)


@dataclass
class ForwardContext:
    """What the backward pass needs from a blur-batch forward."""

    grid: VoxelGrid
    cfg: RenderConfig
    times: np.ndarray
    views: np.ndarray
    twists: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    offsets: np.ndarray
    rgb: np.ndarray
    sample_counts: np.ndarray
    sparse_sums: np.ndarray
    n_controls: tuple = field(default=None)


def render_blur_batch(grid: VoxelGrid, controls: np.ndarray, intrinsics: list,
                      views: np.ndarray, pixels: np.ndarray, times: np.ndarray,
                      cfg: RenderConfig = RenderConfig(), rng=None):
    """
    Blurred colors of a pixel batch across many views.

    controls: (V, M+1, 6) control twists per view; views: (B,) view index of
    each pixel; pixels: (B, 2); times: normalized sub-frame instants. Returns
    (B, 3) colors and the context for :func:`backward`.
    """
    controls = np.asarray(controls, dtype=float)
    views = np.asarray(views, dtype=np.int64)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    times = np.asarray(times, dtype=float)
    n_sub = len(times)
    twists = blend_twists(controls, times)
    rot, trans = exp_map_batch(twists)
    d_cam = np.empty((len(pixels), 3))
    for v in np.unique(views):
        sel = views == v
        d_cam[sel] = camera_directions(intrinsics[v], pixels[sel])
    # rays ordered pixel-major: ray b * n_sub + i
    dirs = np.einsum("bnij,bj->bni", rot[views], d_cam).reshape(-1, 3)
    origins = trans[views].reshape(-1, 3)
    offsets = _offsets(len(origins), cfg, rng)
    rgb, _, counts, sparse = render_rays(grid, origins, dirs, cfg, offsets=offsets)
    pred = rgb.reshape(-1, n_sub, 3).mean(axis=1)
    ctx = ForwardContext(grid, cfg, times, views, twists, origins, dirs, offsets, rgb,
                         counts, sparse, controls.shape)
    return pred, ctx


def backward(grad_pred: np.ndarray, ctx: ForwardContext | None, sparse_coef: float = 0.0,
             want_pose: bool = True) -> GradientBuffer:
    """
    Gradients of a scalar loss given dL/d(blurred color) per batch pixel.

    ``sparse_coef`` scales d/d(sigma) of sum_k log(1 + 2 sigma_k^2) over all
    samples of the batch, letting the sparsity term share this pass.
    """
    if ctx is None or ctx.rgb is None:
        raise StateError("backward called without a recorded forward pass")
    grid = ctx.grid
    n_sub = len(ctx.times)
    grad_rgb = np.repeat(np.asarray(grad_pred, float) / n_sub, n_sub, axis=0)
    grad = GradientBuffer.zeros_like(grid)
    n = len(ctx.origins)
    g_o = np.zeros((n, 3))
    g_d = np.zeros((n, 3))
    _kernels.render_backward(*_grid_args(grid), ctx.origins, ctx.dirs, ctx.offsets,
                             ctx.cfg.step(grid), ctx.cfg.term_thresh, ctx.rgb, grad_rgb,
                             float(sparse_coef), want_pose, grad.density, grad.sh, g_o, g_d)
    if want_pose:
        grad.controls = _pose_gradients(ctx, g_o, g_d)
    return grad


def _pose_gradients(ctx: ForwardContext, g_o: np.ndarray, g_d: np.ndarray) -> np.ndarray:
    n_views, n_ctrl, _ = ctx.n_controls
    n_sub = len(ctx.times)
    # left perturbation exp(eps) P moves origin by w x o + v and direction by w x d
    g_eps = np.concatenate([np.cross(ctx.origins, g_o) + np.cross(ctx.dirs, g_d), g_o], axis=-1)
    slot = (np.repeat(ctx.views, n_sub) * n_sub + np.tile(np.arange(n_sub), len(ctx.views)))
    per_pose = np.zeros((n_views * n_sub, 6))
    for c in range(6):
        per_pose[:, c] = np.bincount(slot, weights=g_eps[:, c], minlength=n_views * n_sub)
    per_pose = per_pose.reshape(n_views, n_sub, 6)
    jac = se3_left_jacobian_batch(ctx.twists)
    g_twist = np.einsum("vnij,vni->vnj", jac, per_pose)
    weights = bernstein_matrix(n_ctrl - 1, ctx.times)
    return np.einsum("nj,vnk->vjk", weights, g_twist)
