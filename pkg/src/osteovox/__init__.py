"""Voxel bone-microstructure generation, degradation simulation and TransVNet forecasting."""

from .voxel import MARROW, MINERAL, DomainError, VoxelGrid, dice, hausdorff, volume_fraction

__version__ = "0.1.0"

__all__ = ["MARROW", "MINERAL", "DomainError", "VoxelGrid", "dice", "hausdorff", "volume_fraction"]
