"""Recover a sharp voxel radiance field and per-view camera trajectories from blurred images."""

__version__ = "0.1.0"
