"""
SE(3) arithmetic and Bezier camera trajectories in the Lie algebra.

Twists are ordered (omega, nu): omega is an axis-angle rotation in radians,
nu the translational part. Poses are camera-to-world, so the camera center is
the pose translation and camera-frame directions are rotated into the world
by the pose rotation.

The batched helpers (``*_batch``) accept arrays with arbitrary leading
dimensions and are what the renderer and trainer call; the scalar functions
wrap them with validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np

from .errors import BranchCutError

SMALL_ANGLE = 1e-6
# The SE(3) Jacobian coefficients cancel catastrophically well above 1e-6.
SMALL_ANGLE_JACOBIAN = 3e-2
BRANCH_CUT_MARGIN = 1e-6
ORTHONORMAL_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator, broadcasting over leading dimensions."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _series_or(theta, small, series, exact):
    # Evaluate `exact` only where it is numerically safe.
    safe = np.where(small, 1.0, theta)
    return np.where(small, series(theta), exact(safe))


def _rodrigues_coeffs(theta: np.ndarray):
    small = theta < SMALL_ANGLE
    a = _series_or(theta, small,
                   lambda t: 1.0 - t**2 / 6.0 + t**4 / 120.0,
                   lambda t: np.sin(t) / t)
    b = _series_or(theta, small,
                   lambda t: 0.5 - t**2 / 24.0 + t**4 / 720.0,
                   lambda t: (1.0 - np.cos(t)) / t**2)
    c = _series_or(theta, small,
                   lambda t: 1.0 / 6.0 - t**2 / 120.0 + t**4 / 5040.0,
                   lambda t: (t - np.sin(t)) / t**3)
    return a, b, c


def so3_exp_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _rodrigues_coeffs(theta)
    w = skew(omega)
    eye = np.broadcast_to(np.eye(3), w.shape)
    return eye + a[..., None, None] * w + b[..., None, None] * (w @ w)


def so3_left_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    """V(omega) = I + B W + C W^2, the SO(3) left Jacobian."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    w = skew(omega)
    eye = np.broadcast_to(np.eye(3), w.shape)
    return eye + b[..., None, None] * w + c[..., None, None] * (w @ w)


def exp_map_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map for twists of shape (..., 6) -> (R (...,3,3), t (...,3))."""
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    rot = so3_exp_batch(omega)
    trans = np.einsum("...ij,...j->...i", so3_left_jacobian_batch(omega), nu)
    return rot, trans


def se3_left_jacobian_batch(xi: np.ndarray) -> np.ndarray:
    """
    Left Jacobian of SE(3) in (omega, nu) ordering, shape (..., 6, 6).

    exp(xi + d) ~= exp(J d) exp(xi) to first order, so J maps a change of the
    twist coordinates to the equivalent left (world-frame) perturbation.
    """
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < SMALL_ANGLE_JACOBIAN
    c = _series_or(theta, small,
                   lambda t: 1.0 / 6.0 - t**2 / 120.0 + t**4 / 5040.0,
                   lambda t: (t - np.sin(t)) / t**3)
    d = _series_or(theta, small,
                   lambda t: 1.0 / 24.0 - t**2 / 720.0 + t**4 / 40320.0,
                   lambda t: (t**2 + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4))
    e = _series_or(theta, small,
                   lambda t: 1.0 / 120.0 - t**2 / 2520.0 + t**4 / 120960.0,
                   lambda t: (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5))
    p = skew(omega)
    r = skew(nu)
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    pp = p @ p
    q = (0.5 * r
         + c[..., None, None] * (pr + rp + prp)
         + d[..., None, None] * (pp @ r + rp @ p - 3.0 * prp)
         + e[..., None, None] * (prp @ p + pp @ r @ p))
    jac = so3_left_jacobian_batch(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = jac
    out[..., 3:, 3:] = jac
    out[..., 3:, :3] = q
    return out


def _rotation_angle(rot: np.ndarray) -> np.ndarray:
    # atan2 keeps precision at both small angles and mid range.
    vee = np.stack([rot[..., 2, 1] - rot[..., 1, 2],
                    rot[..., 0, 2] - rot[..., 2, 0],
                    rot[..., 1, 0] - rot[..., 0, 1]], axis=-1)
    cos_t = (np.trace(rot, axis1=-2, axis2=-1) - 1.0) / 2.0
    sin_t = 0.5 * np.linalg.norm(vee, axis=-1)
    return np.arctan2(sin_t, cos_t), vee


def log_map_batch(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_map_batch`; no branch-cut checks."""
    rot = np.asarray(rot, dtype=float)
    trans = np.asarray(trans, dtype=float)
    theta, vee = _rotation_angle(rot)
    small = theta < SMALL_ANGLE
    half_ratio = _series_or(theta, small,
                            lambda t: 0.5 * (1.0 + t**2 / 6.0 + 7.0 * t**4 / 360.0),
                            lambda t: t / (2.0 * np.sin(t)))
    omega = half_ratio[..., None] * vee
    f = _series_or(theta, small,
                   lambda t: 1.0 / 12.0 + t**2 / 720.0 + t**4 / 30240.0,
                   lambda t: 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    w = skew(omega)
    eye = np.broadcast_to(np.eye(3), w.shape)
    v_inv = eye - 0.5 * w + f[..., None, None] * (w @ w)
    nu = np.einsum("...ij,...j->...i", v_inv, trans)
    return np.concatenate([omega, nu], axis=-1)


def geodesic_angle(r_a: np.ndarray, r_b: np.ndarray) -> np.ndarray:
    """Rotation angle of r_a^T r_b, in radians."""
    rel = np.swapaxes(np.asarray(r_a, float), -1, -2) @ np.asarray(r_b, float)
    return _rotation_angle(rel)[0]


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float).reshape(3)
        nu = np.array(self.nu, dtype=float).reshape(3)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "Twist":
        vec = np.asarray(vec, dtype=float).reshape(6)
        return cls(vec[:3], vec[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])

    def __eq__(self, other):
        if not isinstance(other, Twist):
            return NotImplemented
        return bool(np.array_equal(self.vector, other.vector))

    __hash__ = None


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform ``x_world = R x_cam + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self * other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    __hash__ = None


def exp_map(xi: Twist) -> Pose:
    vec = xi.vector
    if not np.all(np.isfinite(vec)):
        raise ValueError("twist must be finite")
    rot, trans = exp_map_batch(vec)
    return Pose(rot, trans)


def log_map(pose: Pose) -> Twist:
    """Logarithm with ``|omega|`` in [0, pi); raises near the branch cut."""
    rot = pose.rotation
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL or \
            abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
        raise ValueError("rotation is not orthonormal")
    theta = float(_rotation_angle(rot)[0])
    if theta >= np.pi - BRANCH_CUT_MARGIN:
        raise BranchCutError(f"rotation angle {theta:.9f} too close to pi")
    return Twist.from_vector(log_map_batch(rot, pose.translation))


def bernstein_matrix(order: int, t: np.ndarray) -> np.ndarray:
    """Bernstein weights for many times at once, shape (len(t), order+1)."""
    t = np.asarray(t, dtype=float)[..., None]
    j = np.arange(order + 1)
    binom = np.array([comb(order, k) for k in j], dtype=float)
    return binom * (1.0 - t) ** (order - j) * t ** j


def bernstein_weights(order: int, t: float) -> np.ndarray:
    if order < 1:
        raise ValueError("Bezier order must be >= 1")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return bernstein_matrix(order, np.asarray(t))


def subframe_times(n: int) -> np.ndarray:
    """Uniform normalized shutter instants, both endpoints included."""
    if n < 2:
        raise ValueError("at least two sub-frames are required")
    return np.arange(n) / (n - 1)


@dataclass(frozen=True)
class BezierTrajectory:
    control_twists: tuple
    order: int

    def __post_init__(self):
        twists = tuple(self.control_twists)
        if self.order < 1:
            raise ValueError("Bezier order must be >= 1")
        if len(twists) != self.order + 1:
            raise ValueError(f"order {self.order} needs {self.order + 1} control twists, "
                             f"got {len(twists)}")
        object.__setattr__(self, "control_twists", twists)

    @classmethod
    def from_array(cls, controls: np.ndarray) -> "BezierTrajectory":
        controls = np.asarray(controls, dtype=float)
        return cls(tuple(Twist.from_vector(row) for row in controls), controls.shape[0] - 1)

    @property
    def controls(self) -> np.ndarray:
        """Control twists stacked into an (M+1, 6) array."""
        return np.stack([tw.vector for tw in self.control_twists])

    def __eq__(self, other):
        if not isinstance(other, BezierTrajectory):
            return NotImplemented
        return self.order == other.order and np.array_equal(self.controls, other.controls)

    __hash__ = None


def blend_twists(controls: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Coordinate-wise Bezier blend in the Lie algebra.

    ``controls`` has shape (..., M+1, 6); returns (..., len(times), 6).
    """
    controls = np.asarray(controls, dtype=float)
    weights = bernstein_matrix(controls.shape[-2] - 1, times)
    return np.einsum("tj,...jk->...tk", weights, controls)


def pose_at(traj: BezierTrajectory, t: float) -> Pose:
    weights = bernstein_weights(traj.order, t)
    return exp_map(Twist.from_vector(weights @ traj.controls))


def init_trajectory(pose: Pose, order: int) -> BezierTrajectory:
    """Constant curve: every control twist is the log of ``pose``."""
    xi = log_map(pose)
    return BezierTrajectory(tuple(xi for _ in range(order + 1)), order)


def d_pose_d_controls(traj: BezierTrajectory, t: float) -> list[np.ndarray]:
    """
    Sensitivity of the pose at time ``t`` to each control twist.

    Block j is the 6x6 map from a change of control twist j to the left
    perturbation of the pose: ``B_j(t) * J_left(blended twist)``.
    """
    weights = bernstein_weights(traj.order, t)
    jac = se3_left_jacobian_batch(weights @ traj.controls)
    return [w * jac for w in weights]
