"""
Losses, optimizers and the joint grid/trajectory training loop.

Trainable state is kept in float32 so that a checkpoint captures it exactly;
every step promotes it to float64 for rendering, gradients and optimizer
arithmetic and rounds the result back.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import CapacityError, NumericError
from .metrics import psnr
from .render import RenderConfig, backward, render_blur_batch, render_image
from .se3 import BezierTrajectory, Pose, blend_twists, exp_map_batch, log_map_batch, subframe_times
from .voxel import DEFAULT_PRUNE_THRESHOLD, VoxelGrid, prune, upsample

log = logging.getLogger(__name__)

STATE_DTYPE = np.float32


@dataclass(frozen=True)
class TrainConfig:
    lambda_tv: float = 5e-4
    lambda_s: float = 1e-12
    lr_traj: float = 5e-4
    lr_density: float = 0.1
    lr_sh: float = 0.01
    batch_rays: int = 25000
    n_subframes: int = 21
    bezier_order: int = 7
    total_iters: int = 1000
    upsample_every: int = 0
    upsample_factor: tuple = (2, 2, 2)
    max_upsamples: int = 1
    max_params: int | None = None
    init_dims: tuple = (16, 16, 16)
    init_density: float = 0.1
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD
    step_ratio: float = 0.5
    background: tuple = (0.0, 0.0, 0.0)
    jitter: bool = False
    traj_init_noise: float = 0.0
    blur: bool = True
    optimize_poses: bool = True
    traj_warmup: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        positive = ("lambda_tv", "lambda_s", "lr_traj", "lr_density", "lr_sh")
        for name in positive:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be positive")
        if self.n_subframes < 2:
            raise ValueError("n_subframes must be >= 2")
        if self.bezier_order < 1:
            raise ValueError("bezier_order must be >= 1")
        if self.total_iters < 0 or self.upsample_every < 0 or self.traj_warmup < 0:
            raise ValueError("iteration counts must be non-negative")
        if len(self.init_dims) != 3 or min(self.init_dims) < 2:
            raise ValueError("init_dims needs three entries >= 2")

    def render_config(self) -> RenderConfig:
        return RenderConfig(step_ratio=self.step_ratio, background=tuple(self.background),
                            jitter=self.jitter)

    def subframe_times(self) -> np.ndarray:
        return subframe_times(self.n_subframes) if self.blur else np.array([0.5])

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("upsample_factor", "init_dims", "background"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("upsample_factor", "init_dims", "background"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# -- losses -------------------------------------------------------------------

def loss_color(pred, target) -> float:
    pred = np.asarray(pred, float)
    target = np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


def tv_value_and_grad(fields: np.ndarray, want_grad: bool = True):
    """
    Isotropic forward-difference TV summed over fields of shape (X, Y, Z, C).

    Differences that would reach past the last node are omitted. The result
    is divided by the voxel count X*Y*Z.
    """
    fields = np.asarray(fields, float)
    n_vox = int(np.prod(fields.shape[:3]))
    diffs = []
    for axis in range(3):
        d = np.zeros_like(fields)
        src = [slice(None)] * 4
        src[axis] = slice(0, -1)
        nxt = [slice(None)] * 4
        nxt[axis] = slice(1, None)
        d[tuple(src)] = fields[tuple(nxt)] - fields[tuple(src)]
        diffs.append(d)
    norm = np.sqrt(diffs[0] ** 2 + diffs[1] ** 2 + diffs[2] ** 2)
    value = float(norm.sum()) / n_vox
    if not want_grad:
        return value, None
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.zeros_like(fields)
    for axis, d in enumerate(diffs):
        u = np.where(norm > 0, d / safe, 0.0)
        grad -= u
        src = [slice(None)] * 4
        src[axis] = slice(0, -1)
        dst = [slice(None)] * 4
        dst[axis] = slice(1, None)
        grad[tuple(dst)] += u[tuple(src)]
    return value, grad / n_vox


def _tv_fields(grid: VoxelGrid) -> np.ndarray:
    dens = grid.effective_density().astype(float)[..., None]
    return np.concatenate([dens, grid.sh.astype(float)], axis=-1)


def loss_tv(grid: VoxelGrid) -> float:
    """TV of the (occupancy-masked) density plus TV of every SH channel."""
    return tv_value_and_grad(_tv_fields(grid), want_grad=False)[0]


def loss_sparsity(sigmas) -> float:
    sigmas = np.asarray(sigmas, float)
    if sigmas.size == 0:
        return 0.0
    return float(np.mean(np.log1p(2.0 * sigmas ** 2)))


def total_loss(parts: dict, cfg: TrainConfig, iteration: int | None = None) -> float:
    for name in ("color", "tv", "sparsity"):
        if not np.isfinite(parts[name]):
            raise NumericError(f"non-finite {name} loss", iteration, dict(parts))
    return parts["color"] + cfg.lambda_tv * parts["tv"] + cfg.lambda_s * parts["sparsity"]


# -- optimizers ---------------------------------------------------------------

class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, dtype=STATE_DTYPE):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape, dtype)
        self.v = np.zeros(shape, dtype)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        """In-place update; arithmetic in float64, stored in the state dtype."""
        self.t += 1
        g = np.asarray(grad, float)
        m = self.beta1 * self.m.astype(float) + (1 - self.beta1) * g
        v = self.beta2 * self.v.astype(float) + (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        param[...] = param.astype(float) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.m[...] = m
        self.v[...] = v


class RMSProp:
    def __init__(self, shape, lr: float, decay: float = 0.95, eps: float = 1e-8,
                 dtype=STATE_DTYPE):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.sq = np.zeros(shape, dtype)

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        g = np.asarray(grad, float)
        sq = self.decay * self.sq.astype(float) + (1 - self.decay) * g * g
        param[...] = param.astype(float) - self.lr * g / (np.sqrt(sq) + self.eps)
        self.sq[...] = sq


# -- data and state -----------------------------------------------------------

@dataclass
class TrainData:
    """Flattened training pixels of every view."""

    targets: np.ndarray
    views: np.ndarray
    pixels: np.ndarray
    intrinsics: list
    initial_poses: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    test_views: list = field(default_factory=list)

    @classmethod
    def from_observations(cls, observations, bounds_min, bounds_max, test_views=()):
        targets, views, pixels = [], [], []
        for v, obs in enumerate(observations):
            h, w, _ = obs.blurry.shape
            ys, xs = np.mgrid[0:h, 0:w]
            targets.append(obs.blurry.reshape(-1, 3))
            pixels.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
            views.append(np.full(h * w, v))
        return cls(np.concatenate(targets).astype(float), np.concatenate(views),
                   np.concatenate(pixels).astype(float), [o.intrinsics for o in observations],
                   [o.initial_pose for o in observations], np.asarray(bounds_min, float),
                   np.asarray(bounds_max, float), list(test_views))

    @property
    def n_pixels(self) -> int:
        return len(self.targets)


@dataclass
class TrainState:
    iteration: int
    grid: VoxelGrid
    controls: np.ndarray
    adam: Adam
    rms_density: RMSProp
    rms_sh: RMSProp
    rng: np.random.Generator
    perm: np.ndarray
    cursor: int
    n_upsamples: int = 0

    def trajectories(self) -> list[BezierTrajectory]:
        return [BezierTrajectory.from_array(c.astype(float)) for c in self.controls]


def _fresh_grid_optimizers(grid: VoxelGrid, cfg: TrainConfig):
    return RMSProp(grid.density.shape, cfg.lr_density), RMSProp(grid.sh.shape, cfg.lr_sh)


def init_state(cfg: TrainConfig, data: TrainData) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    grid = VoxelGrid.create(cfg.init_dims, data.bounds_min, data.bounds_max,
                            init_density=cfg.init_density, dtype=STATE_DTYPE)
    base = np.stack([log_map_batch(p.rotation[None], p.translation[None])[0]
                     for p in data.initial_poses])
    controls = np.repeat(base[:, None, :], cfg.bezier_order + 1, axis=1)
    if cfg.traj_init_noise > 0:
        controls = controls + rng.normal(scale=cfg.traj_init_noise, size=controls.shape)
    controls = controls.astype(STATE_DTYPE)
    rms_d, rms_s = _fresh_grid_optimizers(grid, cfg)
    perm = rng.permutation(data.n_pixels)
    return TrainState(0, grid, controls, Adam(controls.shape, cfg.lr_traj), rms_d, rms_s,
                      rng, perm, 0)


def _next_batch(state: TrainState, n_pixels: int, batch: int) -> np.ndarray:
    batch = min(batch, n_pixels)
    if state.cursor + batch > len(state.perm):
        state.perm = state.rng.permutation(n_pixels)
        state.cursor = 0
    idx = state.perm[state.cursor:state.cursor + batch]
    state.cursor += batch
    return idx


def train_step(state: TrainState, cfg: TrainConfig, data: TrainData) -> dict:
    """One joint update; returns the loss report measured before the update."""
    idx = _next_batch(state, data.n_pixels, cfg.batch_rays)
    grid = state.grid.astype(np.float64)
    controls = state.controls.astype(np.float64)
    rcfg = cfg.render_config()
    pred, ctx = render_blur_batch(grid, controls, data.intrinsics, data.views[idx],
                                  data.pixels[idx], cfg.subframe_times(), rcfg, state.rng)
    target = data.targets[idx]
    n_samples = int(ctx.sample_counts.sum())
    tv_value, tv_grad = tv_value_and_grad(_tv_fields(grid), want_grad=cfg.lambda_tv > 0)
    parts = {
        "color": loss_color(pred, target),
        "tv": tv_value,
        "sparsity": float(ctx.sparse_sums.sum()) / n_samples if n_samples else 0.0,
    }
    parts["total"] = total_loss(parts, cfg, state.iteration)
    grad_pred = 2.0 * (pred - target) / pred.size
    want_pose = cfg.optimize_poses and cfg.blur and state.iteration >= cfg.traj_warmup
    sparse_coef = cfg.lambda_s / n_samples if n_samples else 0.0
    grads = backward(grad_pred, ctx, sparse_coef=sparse_coef, want_pose=want_pose)
    if tv_grad is not None:
        grads.density += cfg.lambda_tv * tv_grad[..., 0] * grid.occupancy
        grads.sh += cfg.lambda_tv * tv_grad[..., 1:]
    for name, g in (("density", grads.density), ("sh", grads.sh), ("controls", grads.controls)):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite {name} gradient", state.iteration, dict(parts))
    if want_pose:
        state.adam.step(state.controls, grads.controls)
    state.rms_density.step(state.grid.density, grads.density)
    state.rms_sh.step(state.grid.sh, grads.sh)
    state.iteration += 1
    return parts


def refine_grid(state: TrainState, cfg: TrainConfig) -> None:
    """Prune, upsample and restart grid optimizer statistics from zero."""
    pruned = prune(state.grid, cfg.prune_threshold)
    state.grid = upsample(pruned, cfg.upsample_factor, max_params=cfg.max_params)
    state.rms_density, state.rms_sh = _fresh_grid_optimizers(state.grid, cfg)
    state.n_upsamples += 1


def test_psnr(grid: VoxelGrid, data: TrainData, cfg: TrainConfig) -> list[float]:
    rcfg = RenderConfig(step_ratio=cfg.step_ratio, background=tuple(cfg.background))
    grid64 = grid.astype(np.float64)
    return [psnr(np.clip(render_image(grid64, tv.pose, tv.intrinsics, rcfg), 0, 1), tv.image)
            for tv in data.test_views]


@dataclass
class TrainResult:
    grid: VoxelGrid
    trajectories: list
    trace: list
    state: TrainState


def train(cfg: TrainConfig, data: TrainData, state: TrainState | None = None,
          checkpoint: Callable[[TrainState], None] | None = None,
          trace: list | None = None) -> TrainResult:
    """Run (or resume) training up to ``cfg.total_iters`` iterations."""
    state = init_state(cfg, data) if state is None else state
    trace = [] if trace is None else trace
    while state.iteration < cfg.total_iters:
        it = state.iteration
        if (cfg.upsample_every and it > 0 and it % cfg.upsample_every == 0
                and state.n_upsamples < cfg.max_upsamples):
            try:
                refine_grid(state, cfg)
            except CapacityError:
                if checkpoint is not None:
                    checkpoint(state)
                raise
            log.info("iter %d: grid refined to %s", it, state.grid.dims)
        parts = train_step(state, cfg, data)
        done = state.iteration
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.total_iters):
            record = {"iteration": done, **parts}
            if data.test_views:
                record["test_psnr"] = float(np.mean(test_psnr(state.grid, data, cfg)))
            trace.append(record)
            log.info("iter %d: %s", done, record)
        if checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            checkpoint(state)
    return TrainResult(state.grid, state.trajectories(), trace, state)


def midpoint_poses(trajectories) -> list[Pose]:
    twists = np.stack([blend_twists(t.controls, np.array([0.5]))[0] for t in trajectories])
    rot, trans = exp_map_batch(twists)
    return [Pose(r, t) for r, t in zip(rot, trans)]
