"""
Dense voxel grid of raw densities and degree-2 SH color coefficients.

Lattice convention: along an axis with N voxels spanning [lo, hi], node i
sits at ``lo + i * h`` with ``h = (hi - lo) / N``. Each voxel stores the values
of its lower corner. Inside the last slab ``[hi - h, hi]`` the field is
linearly extrapolated from the last two nodes, so a multilinear field is
reproduced exactly everywhere in the bounds and an upsampled lattice (N * f
nodes) contains every old node.

SH coefficients are stored channel-major: index ``c * 9 + b`` is basis b of
color channel c.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import CapacityError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2_XY = 1.0925484305920792
SH_C2_ZZ = 0.31539156525252005
SH_C2_XX_YY = 0.5462742152960396

N_SH = 9
N_SH_COEFFS = 27
PARAMS_PER_VOXEL = 1 + N_SH_COEFFS

DEFAULT_PRUNE_THRESHOLD = 1e-2
DEFAULT_INIT_DENSITY = 0.1


def sh_basis_batch(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis (degrees 0-2) for unit directions of shape (..., 3)."""
    dirs = np.asarray(dirs, dtype=float)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_ZZ * (2.0 * z * z - x * x - y * y),
        SH_C2_XY * x * z,
        SH_C2_XX_YY * (x * x - y * y),
    ], axis=-1)


def sh_basis(d) -> np.ndarray:
    d = np.asarray(d, dtype=float).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("SH basis requires a unit direction")
    return sh_basis_batch(d)


@dataclass
class VoxelGrid:
    dims: tuple
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    density: np.ndarray
    sh: np.ndarray
    occupancy: np.ndarray = field(default=None)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.bounds_min = np.asarray(self.bounds_min, dtype=float).reshape(3)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float).reshape(3)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("grid needs at least 2 voxels per axis")
        if np.any(self.bounds_min >= self.bounds_max):
            raise ValueError("bounds min must be below max on every axis")
        if self.density.shape != self.dims or self.sh.shape != self.dims + (N_SH_COEFFS,):
            raise ValueError("array shapes do not match dims")
        if self.occupancy is None:
            self.occupancy = np.ones(self.dims, dtype=bool)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if not (np.all(np.isfinite(self.density)) and np.all(np.isfinite(self.sh))):
            raise ValueError("grid values must be finite")

    @classmethod
    def create(cls, dims, bounds_min, bounds_max, init_density=DEFAULT_INIT_DENSITY,
               dtype=np.float64) -> "VoxelGrid":
        dims = tuple(int(n) for n in dims)
        return cls(dims, bounds_min, bounds_max,
                   np.full(dims, init_density, dtype=dtype),
                   np.zeros(dims + (N_SH_COEFFS,), dtype=dtype))

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / np.array(self.dims)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_params(self) -> int:
        return self.n_voxels * PARAMS_PER_VOXEL

    @property
    def param_bytes(self) -> int:
        return self.n_params * self.density.dtype.itemsize

    def node_positions(self) -> np.ndarray:
        axes = [self.bounds_min[a] + np.arange(self.dims[a]) * self.voxel_size[a]
                for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def effective_density(self) -> np.ndarray:
        """Raw density with pruned nodes zeroed."""
        return np.where(self.occupancy, self.density, 0.0)

    def astype(self, dtype) -> "VoxelGrid":
        return replace(self, density=self.density.astype(dtype), sh=self.sh.astype(dtype),
                       occupancy=self.occupancy.copy())

    def copy(self) -> "VoxelGrid":
        return replace(self, density=self.density.copy(), sh=self.sh.copy(),
                       occupancy=self.occupancy.copy())


def _corner_weights(grid: VoxelGrid, points: np.ndarray):
    """Lower-corner indices, per-axis fractions and an inside mask."""
    u = (points - grid.bounds_min) / grid.voxel_size
    inside = np.all((points >= grid.bounds_min) & (points <= grid.bounds_max), axis=-1)
    upper = np.array(grid.dims) - 2
    i0 = np.clip(np.floor(u).astype(np.int64), 0, upper)
    return i0, u - i0, inside


def sample_batch(grid: VoxelGrid, points: np.ndarray):
    """Trilinear lookup of (raw density, sh) for points of shape (n, 3).

    Pruned nodes contribute zero density but their stored SH.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    i0, frac, inside = _corner_weights(grid, points)
    dens_src = grid.effective_density()
    density = np.zeros(len(points))
    sh = np.zeros((len(points), N_SH_COEFFS))
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=-1)
        idx = tuple((i0 + offs).T)
        density += w * dens_src[idx]
        sh += w[:, None] * grid.sh[idx]
    density[~inside] = 0.0
    sh[~inside] = 0.0
    return density, sh


def sample(grid: VoxelGrid, x) -> tuple[float, np.ndarray]:
    density, sh = sample_batch(grid, np.asarray(x, float)[None])
    return float(density[0]), sh[0]


def density_at(grid: VoxelGrid, x) -> float:
    return max(sample(grid, x)[0], 0.0)


def sh_to_rgb(sh: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """clamp(S(d) . sh_channel + 0.5, 0, 1) for stacked (..., 27) coefficients."""
    per_channel = np.asarray(sh).reshape(sh.shape[:-1] + (3, N_SH))
    return np.clip(np.einsum("...cb,...b->...c", per_channel, basis) + 0.5, 0.0, 1.0)


def color_at(grid: VoxelGrid, x, d) -> np.ndarray:
    _, sh = sample(grid, x)
    return sh_to_rgb(sh, sh_basis(d))


def upsample(grid: VoxelGrid, factor, max_params: int | None = None) -> VoxelGrid:
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or min(factor) < 1:
        raise ValueError("upsample factors must be integers >= 1")
    new_dims = tuple(n * f for n, f in zip(grid.dims, factor))
    n_params = int(np.prod(new_dims)) * PARAMS_PER_VOXEL
    if max_params is not None and n_params > max_params:
        raise CapacityError(f"upsampled grid needs {n_params} parameters, budget {max_params}")
    if factor == (1, 1, 1):
        return grid.copy()
    new_size = (grid.bounds_max - grid.bounds_min) / np.array(new_dims)
    axes = [grid.bounds_min[a] + np.arange(new_dims[a]) * new_size[a] for a in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # interpolate stored values, not the occupancy-masked ones
    raw_grid = replace(grid, occupancy=np.ones(grid.dims, dtype=bool))
    density, sh = sample_batch(raw_grid, nodes)
    dilated = ndimage.binary_dilation(grid.occupancy, structure=np.ones((3, 3, 3), bool))
    idx = np.meshgrid(*[np.arange(new_dims[a]) // factor[a] for a in range(3)], indexing="ij")
    dtype = grid.density.dtype
    return VoxelGrid(new_dims, grid.bounds_min, grid.bounds_max,
                     density.reshape(new_dims).astype(dtype),
                     sh.reshape(new_dims + (N_SH_COEFFS,)).astype(dtype),
                     dilated[tuple(idx)])


def prune(grid: VoxelGrid, sigma_thresh: float = DEFAULT_PRUNE_THRESHOLD) -> VoxelGrid:
    """Deactivate nodes whose whole 3x3x3 neighborhood is below threshold."""
    if sigma_thresh < 0:
        raise ValueError("pruning threshold must be non-negative")
    dense = np.maximum(grid.effective_density(), 0.0) >= sigma_thresh
    keep = ndimage.binary_dilation(dense, structure=np.ones((3, 3, 3), bool))
    out = grid.copy()
    out.occupancy = grid.occupancy & keep
    return out
