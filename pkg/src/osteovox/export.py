"""Image and mesh export of single frames."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .voxel import MINERAL, VoxelGrid

_AXES = {"x": 0, "y": 1, "z": 2}

# unit-cube corner offsets and, per face direction, the 4 corners in
# counter-clockwise order seen from outside
_FACES = {
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
}


def slice_images(grid: VoxelGrid, axis: str = "z") -> list:
    """Grayscale slices along ``axis``; background maps to 0 and mineral to 255."""
    ax = _AXES[axis]
    img = np.where(grid.array == MINERAL, 255, 0).astype(np.uint8)
    return [Image.fromarray(np.ascontiguousarray(np.take(img, i, axis=ax))) for i in range(img.shape[ax])]


def write_slices(grid: VoxelGrid, directory, axis: str = "z") -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(slice_images(grid, axis)):
        p = directory / f"slice_{axis}{i:04d}.png"
        im.save(p)
        paths.append(p)
    return paths


def voxel_face_mesh(grid: VoxelGrid, phase: int = MINERAL):
    """Exposed voxel faces of ``phase`` as (vertices, triangles).

    Vertices are shared integer lattice points; every exposed face
    contributes two triangles, so an isolated voxel gives 12.
    """
    mask = np.pad(grid.array == phase, 1)
    vert_index = {}
    verts, tris = [], []

    def vid(p):
        if p not in vert_index:
            vert_index[p] = len(verts)
            verts.append(p)
        return vert_index[p]

    inner = (slice(1, -1),) * 3
    for normal, corners in _FACES.items():
        shifted = np.roll(mask, shift=tuple(-n for n in normal), axis=(0, 1, 2))
        exposed = (mask & ~shifted)[inner]
        for x, y, z in np.argwhere(exposed):
            q = [vid((int(x + c[0]), int(y + c[1]), int(z + c[2]))) for c in corners]
            tris.append((q[0], q[1], q[2]))
            tris.append((q[0], q[2], q[3]))
    return np.array(verts, dtype=np.int64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def write_obj(grid: VoxelGrid, path, phase: int = MINERAL) -> tuple:
    verts, tris = voxel_face_mesh(grid, phase)
    with open(path, "w") as fh:
        fh.write(f"# voxel-face surface: {len(verts)} vertices, {len(tris)} triangles\n")
        for v in verts:
            fh.write(f"v {v[0]} {v[1]} {v[2]}\n")
        for t in tris:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return len(verts), len(tris)
