"""Pinhole camera model and ray generation.

Camera frame: +x right, +y down, +z forward. Pixel (x, y) is sampled at its
center (x + 0.5, y + 0.5). Directions are unit length so distances along a
ray are metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .se3 import BezierTrajectory, Pose, pose_at, subframe_times


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(3)
        direction = np.array(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)


def camera_directions(k: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions for integer or sub-pixel coordinates (n, 2)."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    dirs = np.stack([(pixels[:, 0] + 0.5 - k.cx) / k.fx,
                     (pixels[:, 1] + 0.5 - k.cy) / k.fy,
                     np.ones(len(pixels))], axis=-1)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def pixel_grid(k: Intrinsics) -> np.ndarray:
    """All pixel coordinates in row-major order, shape (H*W, 2) as (x, y)."""
    ys, xs = np.mgrid[0:k.height, 0:k.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def _check_pixel(k: Intrinsics, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(2)
    if not (0.0 <= x[0] < k.width and 0.0 <= x[1] < k.height):
        raise ValueError(f"pixel {tuple(x)} outside {k.width}x{k.height} image")
    return x


def ray_for_pixel(k: Intrinsics, pose: Pose, x) -> Ray:
    x = _check_pixel(k, x)
    d_cam = camera_directions(k, x[None])[0]
    return Ray(pose.translation, pose.rotation @ d_cam)


def rays_along_trajectory(k: Intrinsics, traj: BezierTrajectory, x, n: int) -> list[Ray]:
    """One ray per sub-frame pose of the exposure."""
    x = _check_pixel(k, x)
    return [ray_for_pixel(k, pose_at(traj, float(t)), x) for t in subframe_times(n)]
