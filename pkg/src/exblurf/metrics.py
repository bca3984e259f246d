"""Image quality metrics and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .se3 import BezierTrajectory, blend_twists, exp_map_batch, geodesic_angle

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    radius = SSIM_WINDOW // 2
    blur = lambda img: ndimage.gaussian_filter(img, SSIM_SIGMA, truncate=radius / SSIM_SIGMA)
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    # keep only windows that lie fully inside the image
    inner = (slice(radius, x.shape[0] - radius), slice(radius, x.shape[1] - radius))
    return float(np.mean((num / den)[inner]))


def ssim(a, b) -> float:
    """Single-scale SSIM, Gaussian 11x11 window, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])]))


@dataclass(frozen=True)
class TrajectorySamples:
    rotations: np.ndarray
    positions: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if len(times) < 2:
            raise ValueError("need at least two trajectory samples")
        if np.any(np.diff(times) <= 0) or times[0] < 0 or times[-1] > 1:
            raise ValueError("times must be strictly increasing in [0, 1]")
        if len(self.rotations) != len(times) or len(self.positions) != len(times):
            raise ValueError("pose count does not match time count")

    @classmethod
    def from_poses(cls, poses, times) -> "TrajectorySamples":
        return cls(np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]),
                   np.asarray(times, float))

    @classmethod
    def from_trajectory(cls, traj: BezierTrajectory, times) -> "TrajectorySamples":
        times = np.asarray(times, dtype=float)
        rot, trans = exp_map_batch(blend_twists(traj.controls, times))
        return cls(rot, trans, times)


@dataclass(frozen=True)
class ATEResult:
    pos: float
    rot: float
    degenerate: bool = False


def rigid_alignment(src: np.ndarray, dst: np.ndarray):
    """(R, t, degenerate) minimizing sum |R src_i + t - dst_i|^2."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    spread = np.linalg.svd(a, compute_uv=False) if len(a) else np.zeros(3)
    if len(src) < 3 or spread[1] <= 1e-9 * max(spread[0], 1e-300):
        return np.eye(3), mu_d - mu_s, True
    u, _, vt = np.linalg.svd(b.T @ a)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    rot = u @ fix @ vt
    return rot, mu_d - rot @ mu_s, False


def _aligned_errors(est_r, est_p, gt_r, gt_p):
    rot, trans, degenerate = rigid_alignment(est_p, gt_p)
    pos_err = np.linalg.norm(est_p @ rot.T + trans - gt_p, axis=-1)
    rot_err = geodesic_angle(np.einsum("ij,njk->nik", rot, est_r), gt_r)
    return pos_err, rot_err, degenerate


def ate(est: TrajectorySamples, gt: TrajectorySamples) -> ATEResult:
    if len(est.times) != len(gt.times):
        raise ValueError("estimated and ground-truth sample counts differ")
    if not np.allclose(est.times, gt.times, atol=1e-12):
        raise ValueError("estimated and ground-truth sample times differ")
    pos_err, rot_err, degenerate = _aligned_errors(est.rotations, est.positions,
                                                   gt.rotations, gt.positions)
    return ATEResult(float(np.sqrt(np.mean(pos_err ** 2))), float(np.sqrt(np.mean(rot_err ** 2))),
                     degenerate)


@dataclass
class PooledATE:
    pos: float
    rot: float
    per_view_pos: list
    per_view_rot: list
    reversed_views: list
    degenerate: bool


def pooled_ate(est_trajs, gt_trajs, n_samples: int = 11, allow_reversal: bool = True) -> PooledATE:
    """
    ATE over many per-view trajectories with one shared rigid alignment.

    A blurred image does not encode the direction of travel, so with
    ``allow_reversal`` each estimated curve is compared either forwards or
    backwards in time, whichever sits closer to its ground truth.
    """
    if len(est_trajs) != len(gt_trajs) or not est_trajs:
        raise ValueError("need matching, non-empty trajectory lists")
    times = np.linspace(0.0, 1.0, n_samples)
    est_r, est_p, gt_r, gt_p, flipped = [], [], [], [], []
    for e, g in zip(est_trajs, gt_trajs):
        er, ep = exp_map_batch(blend_twists(e.controls, times))
        gr, gp = exp_map_batch(blend_twists(g.controls, times))
        flip = False
        if allow_reversal:
            fwd = np.sum((ep - gp) ** 2)
            bwd = np.sum((ep[::-1] - gp) ** 2)
            flip = bool(bwd < fwd)
        if flip:
            er, ep = er[::-1], ep[::-1]
        est_r.append(er)
        est_p.append(ep)
        gt_r.append(gr)
        gt_p.append(gp)
        flipped.append(flip)
    pos_err, rot_err, degenerate = _aligned_errors(np.concatenate(est_r), np.concatenate(est_p),
                                                   np.concatenate(gt_r), np.concatenate(gt_p))
    pos_err = pos_err.reshape(len(est_trajs), n_samples)
    rot_err = rot_err.reshape(len(est_trajs), n_samples)
    per_pos = np.sqrt(np.mean(pos_err ** 2, axis=1))
    per_rot = np.sqrt(np.mean(rot_err ** 2, axis=1))
    return PooledATE(float(np.sqrt(np.mean(per_pos ** 2))), float(np.sqrt(np.mean(per_rot ** 2))),
                     per_pos.tolist(), per_rot.tolist(), [i for i, f in enumerate(flipped) if f],
                     degenerate)
