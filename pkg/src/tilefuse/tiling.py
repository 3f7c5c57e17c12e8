"""Overlapping sub-space lattices over the canonical grid.

Corners are placed uniformly per axis across [0, dim - size]; the 2x2x2
preset partitions the volume exactly, the 3x3x3 preset overlaps. Tiles are
ordered z-major, then y, then x, with 1-based indices; the ordering is
stable and documented because downstream bookkeeping refers to tile indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, CoverageGapError, InvalidLatticeError
from .registration import AffineTransform
from .volume import AnyVolume, LabelVolume, Volume

# Standard tile sizes for the 1 mm canonical brain grid
MNI_DIMS = (172, 220, 156)
SLANT27_MNI_SIZE = (96, 128, 88)
SLANT8_MNI_SIZE = (86, 110, 78)


@dataclass(frozen=True)
class SubSpace:
    """Axis-aligned crop: corner (voxels), size (voxels), 1-based index."""

    corner: tuple[int, int, int]
    size: tuple[int, int, int]
    index: int

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))


@dataclass(frozen=True)
class TileLattice:
    canonical_dims: tuple[int, int, int]
    counts: tuple[int, int, int]
    tile_size: tuple[int, int, int]
    tiles: tuple[SubSpace, ...]

    @property
    def k(self) -> int:
        return len(self.tiles)

    def to_json(self) -> str:
        doc = {
            "canonical_dims": list(self.canonical_dims),
            "counts": list(self.counts),
            "tile_size": list(self.tile_size),
            "tiles": [
                {"index": t.index, "corner": list(t.corner), "size": list(t.size)}
                for t in self.tiles
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TileLattice":
        doc = json.loads(text)
        tiles = tuple(
            SubSpace(tuple(t["corner"]), tuple(t["size"]), int(t["index"]))
            for t in doc["tiles"]
        )
        return cls(tuple(doc["canonical_dims"]), tuple(doc["counts"]),
                   tuple(doc["tile_size"]), tiles)


def _axis_corners(dim: int, count: int, size: int) -> list[int]:
    span = dim - size
    if count == 1:
        return [span // 2]
    # uniform placement, round half up
    return [int(math.floor(i * span / (count - 1) + 0.5)) for i in range(count)]


def make_lattice(canonical_dims, counts, tile_size) -> TileLattice:
    """Uniformly placed lattice; rejects impossible or gappy configurations."""
    dims = tuple(int(d) for d in canonical_dims)
    counts = tuple(int(c) for c in counts)
    size = tuple(int(s) for s in tile_size)
    for ax in range(3):
        if counts[ax] < 1 or size[ax] < 1:
            raise InvalidLatticeError(f"axis {ax}: counts and sizes must be >= 1")
        if size[ax] > dims[ax]:
            raise InvalidLatticeError(
                f"axis {ax}: tile size {size[ax]} exceeds volume dim {dims[ax]}"
            )
        if counts[ax] * size[ax] < dims[ax]:
            raise CoverageGapError(
                f"axis {ax}: {counts[ax]} tiles of {size[ax]} cannot cover "
                f"{dims[ax]} voxels"
            )

    per_axis = [_axis_corners(dims[ax], counts[ax], size[ax]) for ax in range(3)]
    tiles = []
    index = 1
    for cz in per_axis[2]:
        for cy in per_axis[1]:
            for cx in per_axis[0]:
                tiles.append(SubSpace((cx, cy, cz), size, index))
                index += 1
    return TileLattice(dims, counts, size, tuple(tiles))


def preset_lattice(name: str, canonical_dims) -> TileLattice:
    """Named lattices; on the MNI grid the standard tile sizes apply."""
    dims = tuple(int(d) for d in canonical_dims)
    if name == "slant8":
        size = SLANT8_MNI_SIZE if dims == MNI_DIMS else \
            tuple(-(-d // 2) for d in dims)
        return make_lattice(dims, (2, 2, 2), size)
    if name == "slant27":
        size = SLANT27_MNI_SIZE if dims == MNI_DIMS else \
            tuple(-(-(5 * d) // 9) for d in dims)
        return make_lattice(dims, (3, 3, 3), size)
    raise InvalidLatticeError(f"unknown lattice preset {name!r}")


def extract_tile(v: AnyVolume, s: SubSpace) -> AnyVolume:
    """Crop a sub-space; world coordinates of the crop are preserved."""
    for ax in range(3):
        if s.corner[ax] < 0 or s.corner[ax] + s.size[ax] > v.dims[ax]:
            raise BoundsError(
                f"sub-space {s.corner}+{s.size} outside volume dims {v.dims}"
            )
    data = v.data[s.slices()].copy()
    shift = np.eye(4)
    shift[:3, 3] = s.corner
    affine = AffineTransform(v.voxel_to_world.matrix @ shift)
    if isinstance(v, LabelVolume):
        return LabelVolume(data, v.spacing, affine, v.label_count)
    return Volume(data, v.spacing, affine)


def coverage_map(lat: TileLattice) -> Volume:
    """Per-voxel count of covering tiles, as an integer-valued Volume."""
    counts = np.zeros(lat.canonical_dims, dtype=np.int32)
    for tile in lat.tiles:
        counts[tile.slices()] += 1
    return Volume(counts, (1.0, 1.0, 1.0))
