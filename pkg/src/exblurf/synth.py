"""
Procedural ground-truth scenes, random 6-DOF blur trajectories and an
independent brute-force renderer.

The reference renderer here deliberately shares no code with the engine's
compiled kernels: ray/box clipping, trilinear lookup (scipy
``map_coordinates`` on a padded lattice), SH evaluation (scipy's complex
spherical harmonics) and compositing are all re-derived.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from .camera import Intrinsics, camera_directions, pixel_grid
from .se3 import (BezierTrajectory, Pose, Twist, blend_twists, exp_map_batch, log_map,
                  pose_at, subframe_times)
from .voxel import N_SH, N_SH_COEFFS, SH_C0, VoxelGrid

WORLD_UP = np.array([0.0, -1.0, 0.0])
ORACLE_CHUNK_POINTS = 2_000_000


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple
    size: tuple
    density: float
    albedo: tuple

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density < 0:
            raise ValueError("primitive density must be non-negative")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must lie in [0, 1]")

    def contains(self, points: np.ndarray) -> np.ndarray:
        rel = points - np.asarray(self.center, float)
        if self.kind == "box":
            return np.all(np.abs(rel) <= 0.5 * np.asarray(self.size, float), axis=-1)
        return np.linalg.norm(rel, axis=-1) <= float(self.size[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "density": self.density, "albedo": list(self.albedo)}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        size = d["size"] if isinstance(d["size"], (list, tuple)) else [d["size"]]
        return cls(d["kind"], tuple(d["center"]), tuple(size), float(d["density"]),
                   tuple(d["albedo"]))


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    dims: tuple
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = np.asarray(self.bounds_min, float)
        hi = np.asarray(self.bounds_max, float)
        for p in self.primitives:
            c = np.asarray(p.center, float)
            if np.any(c < lo) or np.any(c > hi):
                raise ValueError("primitive center outside scene bounds")

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives], "dims": list(self.dims),
                "bounds_min": list(self.bounds_min), "bounds_max": list(self.bounds_max)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]), tuple(d["dims"]),
                   tuple(d.get("bounds_min", (-1, -1, -1))), tuple(d.get("bounds_max", (1, 1, 1))))


def build_gt_grid(spec: SceneSpec) -> VoxelGrid:
    """Rasterize primitives onto the node lattice by node-in-primitive tests."""
    if spec is None or spec.dims is None or len(spec.dims) != 3:
        raise ValueError("scene spec needs a 3D grid resolution")
    grid = VoxelGrid.create(spec.dims, spec.bounds_min, spec.bounds_max, init_density=0.0)
    nodes = grid.node_positions()
    for prim in spec.primitives:
        inside = prim.contains(nodes)
        grid.density[inside] = np.maximum(grid.density[inside], prim.density)
        coeffs = np.zeros(N_SH_COEFFS)
        coeffs[::N_SH] = (np.asarray(prim.albedo, float) - 0.5) / SH_C0
        grid.sh[inside] = coeffs
    return grid


def default_scene(dims=(32, 32, 32)) -> SceneSpec:
    """Checkered floor with a handful of colored boxes and spheres (+y is down)."""
    prims = []
    tile = 0.3
    palette = [(0.9, 0.85, 0.2), (0.1, 0.2, 0.6)]
    for i in range(6):
        for j in range(6):
            cx = -0.9 + tile * (i + 0.5)
            cz = -0.9 + tile * (j + 0.5)
            prims.append(Primitive("box", (cx, 0.6, cz), (tile, 0.16, tile), 60.0,
                                   palette[(i + j) % 2]))
    prims += [
        Primitive("box", (-0.45, 0.2, -0.3), (0.35, 0.65, 0.35), 60.0, (0.9, 0.15, 0.1)),
        Primitive("box", (0.4, 0.3, 0.35), (0.5, 0.45, 0.22), 60.0, (0.15, 0.8, 0.25)),
        Primitive("sphere", (0.35, 0.1, -0.45), (0.3,), 60.0, (0.95, 0.95, 0.95)),
        Primitive("sphere", (-0.35, 0.3, 0.45), (0.22,), 60.0, (0.7, 0.2, 0.8)),
        Primitive("box", (0.0, -0.25, 0.0), (0.2, 0.2, 0.2), 60.0, (0.1, 0.9, 0.9)),
        Primitive("box", (0.05, 0.35, -0.05), (0.14, 0.35, 0.14), 60.0, (0.05, 0.05, 0.05)),
    ]
    return SceneSpec(tuple(prims), tuple(dims))


def look_at(eye, target=(0.0, 0.0, 0.0), up=WORLD_UP) -> Pose:
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


@dataclass(frozen=True)
class CameraRig:
    """Cameras on an arc of a horizontal circle, all looking at the origin."""

    radius: float = 3.2
    elevation: float = 0.35
    arc: float = np.pi
    n_views: int = 12
    n_test: int = 4
    width: int = 40
    height: int = 40
    focal: float = 52.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0,
                          self.width, self.height)

    def _pose(self, azimuth: float) -> Pose:
        eye = self.radius * np.array([np.sin(azimuth) * np.cos(self.elevation),
                                      -np.sin(self.elevation),
                                      -np.cos(azimuth) * np.cos(self.elevation)])
        return look_at(eye)

    def train_poses(self) -> list[Pose]:
        az = np.linspace(-self.arc / 2, self.arc / 2, self.n_views)
        return [self._pose(a) for a in az]

    def test_poses(self) -> list[Pose]:
        spacing = self.arc / max(self.n_views - 1, 1)
        slots = np.linspace(-self.arc / 2, self.arc / 2, self.n_views)[:-1] + spacing / 2
        pick = np.linspace(0, len(slots) - 1, self.n_test).round().astype(int)
        return [self._pose(a) for a in slots[pick]]

    def to_dict(self) -> dict:
        return dict(radius=self.radius, elevation=self.elevation, arc=self.arc,
                    n_views=self.n_views, n_test=self.n_test, width=self.width,
                    height=self.height, focal=self.focal)


def _uniform_ball(rng, radius: float) -> np.ndarray:
    if radius == 0:
        return np.zeros(3)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / 3.0)


def random_trajectory(rng, order: int, rot_max: float, trans_max: float,
                      anchor: Pose) -> BezierTrajectory:
    """Control twists jittered uniformly in balls around log(anchor)."""
    if rot_max < 0 or trans_max < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    base = log_map(anchor).vector
    controls = []
    for _ in range(order + 1):
        delta = np.concatenate([_uniform_ball(rng, rot_max), _uniform_ball(rng, trans_max)])
        controls.append(Twist.from_vector(base + delta))
    return BezierTrajectory(tuple(controls), order)


# -- reference renderer -------------------------------------------------------

def _real_sh(dirs: np.ndarray) -> np.ndarray:
    """Real SH via scipy's complex harmonics (Condon-Shortley phase cancels)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    polar = np.arccos(np.clip(z, -1.0, 1.0))
    azim = np.arctan2(y, x)
    out = []
    for l in range(3):
        for m in range(-l, l + 1):
            ylm = special.sph_harm_y(l, abs(m), polar, azim)
            if m < 0:
                out.append(np.sqrt(2.0) * (-1) ** m * ylm.imag)
            elif m == 0:
                out.append(ylm.real)
            else:
                out.append(np.sqrt(2.0) * (-1) ** m * ylm.real)
    return np.stack(out, axis=-1)


def _box_clip(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lo - origins) * inv
        t_b = (hi - origins) * inv
    t_lo = np.where(dirs == 0, np.where((origins >= lo) & (origins <= hi), -np.inf, np.inf),
                    np.minimum(t_a, t_b))
    t_hi = np.where(dirs == 0, np.where((origins >= lo) & (origins <= hi), np.inf, -np.inf),
                    np.maximum(t_a, t_b))
    return np.maximum(t_lo.max(axis=-1), 0.0), t_hi.min(axis=-1)


def _padded(values: np.ndarray) -> np.ndarray:
    # One extra node per axis, linearly extrapolated from the last two.
    out = values
    for axis in range(3):
        last = np.take(out, [-1], axis=axis)
        prev = np.take(out, [-2], axis=axis)
        out = np.concatenate([out, 2.0 * last - prev], axis=axis)
    return out


class OracleRenderer:
    """Straightforward Eq.-style summation over uniformly spaced samples."""

    def __init__(self, grid: VoxelGrid, fine_step: float, background=(0.0, 0.0, 0.0)):
        self.grid = grid
        self.step = float(fine_step)
        self.background = np.asarray(background, float)
        self.lo = grid.bounds_min
        self.hi = grid.bounds_max
        self.h = grid.voxel_size
        dens = np.where(grid.occupancy, grid.density, 0.0).astype(float)
        self.density = _padded(dens)
        sh = grid.sh.astype(float)
        self.channels = {q: _padded(sh[..., q]) for q in range(N_SH_COEFFS)
                         if np.any(sh[..., q] != 0.0)}

    def _lookup(self, field_, coords):
        return ndimage.map_coordinates(field_, coords, order=1, mode="nearest")

    def render(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        origins = np.asarray(origins, float).reshape(-1, 3)
        dirs = np.asarray(dirs, float).reshape(-1, 3)
        t0, t1 = _box_clip(origins, dirs, self.lo, self.hi)
        k_first = np.ceil(t0 / self.step - 0.5)
        k_last = np.floor(t1 / self.step - 0.5)
        n_samples = np.where(t1 >= t0, np.maximum(k_last - k_first + 1, 0), 0).astype(int)
        out = np.empty((len(origins), 3))
        p_max = max(int(n_samples.max(initial=0)), 1)
        chunk = max(1, ORACLE_CHUNK_POINTS // p_max)
        for s in range(0, len(origins), chunk):
            sl = slice(s, s + chunk)
            out[sl] = self._render_chunk(origins[sl], dirs[sl], k_first[sl], n_samples[sl], p_max)
        return out

    def _render_chunk(self, origins, dirs, k_first, n_samples, p_max):
        ks = k_first[:, None] + np.arange(p_max)[None, :]
        dist = (ks + 0.5) * self.step
        pts = origins[:, None, :] + dist[..., None] * dirs[:, None, :]
        valid = (np.arange(p_max)[None, :] < n_samples[:, None])
        valid &= np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)
        coords = ((pts - self.lo) / self.h).reshape(-1, 3).T
        sigma = np.maximum(self._lookup(self.density, coords).reshape(valid.shape), 0.0)
        sigma = np.where(valid, sigma, 0.0)
        basis = _real_sh(dirs)
        color = np.full(valid.shape + (3,), 0.5)
        for q, field_ in self.channels.items():
            ch, b = divmod(q, N_SH)
            color[..., ch] += basis[:, None, b] * self._lookup(field_, coords).reshape(valid.shape)
        color = np.clip(color, 0.0, 1.0)
        optical = sigma * self.step
        before = np.cumsum(optical, axis=1) - optical
        trans = np.exp(-before)
        weights = trans * (1.0 - np.exp(-optical))
        rgb = np.sum(weights[..., None] * color, axis=1)
        t_final = np.exp(-np.sum(optical, axis=1))
        return rgb + t_final[:, None] * self.background


def oracle_render_rays(grid: VoxelGrid, origins, dirs, fine_step: float,
                       background=(0.0, 0.0, 0.0)) -> np.ndarray:
    return OracleRenderer(grid, fine_step, background).render(origins, dirs)


def oracle_render_ray(grid: VoxelGrid, ray, fine_step: float,
                      background=(0.0, 0.0, 0.0)) -> np.ndarray:
    return oracle_render_rays(grid, ray.origin[None], ray.direction[None], fine_step,
                              background)[0]


# -- datasets ----------------------------------------------------------------

@dataclass
class BlurObservation:
    blurry: np.ndarray
    sharp: np.ndarray
    intrinsics: Intrinsics
    initial_pose: Pose
    gt_trajectory: BezierTrajectory | None = None

    def __post_init__(self):
        if self.sharp is not None and self.sharp.shape != self.blurry.shape:
            raise ValueError("blurry and sharp images differ in size")


@dataclass
class TestView:
    image: np.ndarray
    pose: Pose
    intrinsics: Intrinsics


@dataclass
class Dataset:
    observations: list
    test_views: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BlurSettings:
    order: int = 3
    rot_max: float = np.deg2rad(5.0)
    trans_max: float = 0.1


def _render_view(renderer: OracleRenderer, pose_r, pose_t, k: Intrinsics) -> np.ndarray:
    """Mean over poses of full-frame renders; pose_r (n,3,3), pose_t (n,3)."""
    d_cam = camera_directions(k, pixel_grid(k))
    acc = np.zeros((len(d_cam), 3))
    for rot, trans in zip(pose_r, pose_t):
        dirs = d_cam @ rot.T
        acc += renderer.render(np.broadcast_to(trans, dirs.shape), dirs)
    return (acc / len(pose_r)).reshape(k.height, k.width, 3)


def generate_dataset(spec: SceneSpec, rig: CameraRig, blur: BlurSettings, rng,
                     n_oracle: int = 64, step_ratio: float = 0.5,
                     gt_grid: VoxelGrid | None = None) -> Dataset:
    if rig.n_views < 2:
        raise ValueError("need at least two training views")
    if n_oracle < 1:
        raise ValueError("n_oracle must be >= 1")
    grid = build_gt_grid(spec) if gt_grid is None else gt_grid
    renderer = OracleRenderer(grid, float(np.min(grid.voxel_size)) * step_ratio)
    k = rig.intrinsics()
    # midpoint rule for the exposure integral; equal weights on an
    # endpoint-inclusive grid would be first order in 1/n_oracle
    times = (np.arange(n_oracle) + 0.5) / n_oracle
    observations = []
    for anchor in rig.train_poses():
        traj = random_trajectory(rng, blur.order, blur.rot_max, blur.trans_max, anchor)
        rot, trans = exp_map_batch(blend_twists(traj.controls, times))
        blurry = _render_view(renderer, rot, trans, k)
        mid = pose_at(traj, 0.5)
        sharp = _render_view(renderer, mid.rotation[None], mid.translation[None], k)
        observations.append(BlurObservation(blurry, sharp, k, mid, traj))
    tests = []
    for pose in rig.test_poses():
        img = _render_view(renderer, pose.rotation[None], pose.translation[None], k)
        tests.append(TestView(img, pose, k))
    meta = {"scene": spec.to_dict(), "rig": rig.to_dict(),
            "blur": {"order": blur.order, "rot_max": blur.rot_max, "trans_max": blur.trans_max},
            "n_oracle": n_oracle}
    return Dataset(observations, tests, np.asarray(spec.bounds_min, float),
                   np.asarray(spec.bounds_max, float), meta)
