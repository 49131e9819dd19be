"""Dense segmented voxel grids, overlap/distance metrics and cube symmetries.

Grids are indexed ``array[x, y, z]``. The flat ``data`` view is x-fastest,
i.e. ``offset = (z * ny + y) * nx + x``, which is Fortran order for an
``(nx, ny, nz)`` array.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MARROW = 0
MINERAL = 1


class DomainError(ValueError):
    """Raised when an operation's precondition on its inputs is violated."""


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable 3D array of phase labels."""

    array: np.ndarray
    n_phases: int = 2

    def __post_init__(self):
        arr = np.array(self.array, dtype=np.uint8, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DomainError(f"grid must be a non-empty 3D array, got shape {arr.shape}")
        if self.n_phases < 1 or self.n_phases > 256:
            raise DomainError(f"n_phases must be in [1, 256], got {self.n_phases}")
        if arr.size and int(arr.max()) >= self.n_phases:
            raise DomainError(f"label {int(arr.max())} >= n_phases {self.n_phases}")
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_flat(cls, data, dims, n_phases: int = 2) -> "VoxelGrid":
        data = np.asarray(data, dtype=np.uint8)
        nx, ny, nz = (int(d) for d in dims)
        if data.size != nx * ny * nz:
            raise DomainError(f"data length {data.size} != {nx}*{ny}*{nz}")
        return cls(data.reshape((nx, ny, nz), order="F"), n_phases)

    @classmethod
    def zeros(cls, dims, n_phases: int = 2) -> "VoxelGrid":
        return cls(np.zeros(tuple(int(d) for d in dims), dtype=np.uint8), n_phases)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.array.shape)

    @property
    def size(self) -> int:
        return int(self.array.size)

    @property
    def data(self) -> np.ndarray:
        """Flat x-fastest label buffer."""
        return self.array.ravel(order="F")

    def tobytes(self) -> bytes:
        return self.array.tobytes(order="F")

    def mask(self, phase: int) -> np.ndarray:
        _check_phase(self, phase)
        return self.array == phase

    def count(self, phase: int) -> int:
        return int(np.count_nonzero(self.mask(phase)))

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.n_phases == other.n_phases and np.array_equal(self.array, other.array)

    def __hash__(self):
        return hash((self.dims, self.n_phases, self.tobytes()))

    def __repr__(self):
        return f"VoxelGrid(dims={self.dims}, n_phases={self.n_phases})"


def _check_phase(grid: VoxelGrid, phase: int) -> None:
    if not 0 <= phase < grid.n_phases:
        raise DomainError(f"phase {phase} not in [0, {grid.n_phases})")


def _check_same_dims(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.dims != b.dims:
        raise DomainError(f"dimension mismatch: {a.dims} vs {b.dims}")


def volume_fraction(grid: VoxelGrid, phase: int = MINERAL) -> float:
    return grid.count(phase) / grid.size


@dataclass
class ComponentLabeling:
    """Component ids per voxel (0 = outside the phase), ids ordered by size."""

    labels: np.ndarray
    component_sizes: list[int] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.component_sizes)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise DomainError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(grid: VoxelGrid, phase: int = MINERAL, connectivity: int = 6) -> ComponentLabeling:
    """Label the connected components of one phase.

    Component 1 is the largest; ties keep scan order.
    """
    raw, n = ndimage.label(grid.mask(phase), structure=_structure(connectivity))
    if n == 0:
        return ComponentLabeling(raw.astype(np.int32), [])
    sizes = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    order = np.argsort(-sizes, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return ComponentLabeling(remap[raw], [int(s) for s in sizes[order]])


def largest_component_fraction(grid: VoxelGrid, phase: int = MINERAL, connectivity: int = 6) -> float:
    comps = connected_components(grid, phase, connectivity)
    if not comps.component_sizes:
        raise DomainError(f"phase {phase} is empty")
    return comps.component_sizes[0] / sum(comps.component_sizes)


def dice(a: VoxelGrid, b: VoxelGrid, phase: int = MINERAL) -> float:
    """Dice-Sorensen overlap of the ``phase`` voxel sets; 1.0 if both are empty."""
    _check_same_dims(a, b)
    ma, mb = a.mask(phase), b.mask(phase)
    total = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))
    if total == 0:
        return 1.0
    return 2 * int(np.count_nonzero(ma & mb)) / total


def _directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # exact Euclidean distance from every src voxel to the nearest dst voxel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hausdorff(a: VoxelGrid, b: VoxelGrid, phase: int = MINERAL, mode: str = "max") -> float:
    """Symmetric Hausdorff distance in voxel units.

    ``mode="max"`` is the classical Hausdorff distance. ``mode="average"``
    pools the nearest-neighbour distances of both sets and returns their
    mean, ``(sum_a d(a, B) + sum_b d(b, A)) / (|A| + |B|)``.
    """
    _check_same_dims(a, b)
    ma, mb = a.mask(phase), b.mask(phase)
    if not ma.any() or not mb.any():
        raise DomainError("hausdorff distance needs two non-empty voxel sets")
    dab = _directed_distances(ma, mb)
    dba = _directed_distances(mb, ma)
    if mode == "max":
        return float(max(dab.max(), dba.max()))
    if mode == "average":
        return float((dab.sum() + dba.sum()) / (dab.size + dba.size))
    raise DomainError(f"unknown hausdorff mode {mode!r}")


def resize_nearest(grid: VoxelGrid, new_dims) -> VoxelGrid:
    """Nearest-neighbour label resampling with voxel-centre alignment."""
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise DomainError(f"new_dims must be three positive ints, got {new_dims}")
    idx = []
    for n_in, n_out in zip(grid.dims, new_dims):
        src = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.intp)
        idx.append(np.minimum(src, n_in - 1))
    return VoxelGrid(grid.array[np.ix_(*idx)], grid.n_phases)


# Octahedral group: 6 axis permutations x 8 axis reflections.
_PERMS = list(itertools.permutations(range(3)))
_FLIPS = [tuple(bool(bits >> k & 1) for k in range(3)) for bits in range(8)]
N_SYMMETRIES = 48


def _apply_raw(arr: np.ndarray, index: int) -> np.ndarray:
    perm = _PERMS[index // 8]
    flips = _FLIPS[index % 8]
    out = np.transpose(arr, perm)
    axes = tuple(k for k in range(3) if flips[k])
    if axes:
        out = np.flip(out, axis=axes)
    return out


def _build_tables():
    probe = np.arange(27).reshape(3, 3, 3)
    images = [_apply_raw(probe, i) for i in range(N_SYMMETRIES)]
    lookup = {img.tobytes(): i for i, img in enumerate(images)}
    compose = np.empty((N_SYMMETRIES, N_SYMMETRIES), dtype=np.int64)
    for i in range(N_SYMMETRIES):
        for j in range(N_SYMMETRIES):
            compose[i, j] = lookup[np.ascontiguousarray(_apply_raw(images[i], j)).tobytes()]
    inverse = np.array([int(np.flatnonzero(compose[i] == 0)[0]) for i in range(N_SYMMETRIES)])
    return compose, inverse


_COMPOSE, _INVERSE = _build_tables()


@dataclass(frozen=True)
class SymmetryElement:
    """One of the 48 rotations/reflections of a cube."""

    index: int

    def __post_init__(self):
        if not 0 <= self.index < N_SYMMETRIES:
            raise DomainError(f"symmetry index must be in [0, 48), got {self.index}")

    @property
    def inverse(self) -> "SymmetryElement":
        return SymmetryElement(int(_INVERSE[self.index]))

    def then(self, other: "SymmetryElement") -> "SymmetryElement":
        """Element equivalent to applying ``self`` and then ``other``."""
        return SymmetryElement(int(_COMPOSE[self.index, other.index]))

    def apply_array(self, arr: np.ndarray) -> np.ndarray:
        """Apply to the last three axes of ``arr`` (leading axes untouched)."""
        lead = arr.ndim - 3
        perm = _PERMS[self.index // 8]
        out = np.transpose(arr, tuple(range(lead)) + tuple(lead + p for p in perm))
        axes = tuple(lead + k for k in range(3) if _FLIPS[self.index % 8][k])
        if axes:
            out = np.flip(out, axis=axes)
        return np.ascontiguousarray(out)


IDENTITY = SymmetryElement(0)


def apply_symmetry(grid: VoxelGrid, s: SymmetryElement) -> VoxelGrid:
    nx, ny, nz = grid.dims
    if not nx == ny == nz:
        raise DomainError(f"symmetry transforms need a cubic grid, got {grid.dims}")
    return VoxelGrid(s.apply_array(grid.array), grid.n_phases)
