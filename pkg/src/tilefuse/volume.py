"""Voxel-grid data types and geometric resampling.

A volume is a dense 3D scalar grid indexed [x, y, z] with per-axis spacing
in mm and an invertible voxel-to-world affine. Arrays are x-fastest on disk;
in memory any layout is fine since indexing is positional. Volumes are
treated as immutable after construction; all operations return new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .errors import GeometryError, InvalidInterpolationError
from .registration import AffineTransform, compose, invert
from ._interp import sample_nearest, sample_trilinear


def _check_geometry(data: np.ndarray, spacing, voxel_to_world: AffineTransform):
    if data.ndim != 3:
        raise ValueError(f"volume data must be 3D, got shape {data.shape}")
    if min(data.shape) < 1:
        raise ValueError(f"volume dims must be positive, got {data.shape}")
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive finite reals, got {spacing}")
    if not isinstance(voxel_to_world, AffineTransform):
        raise TypeError("voxel_to_world must be an AffineTransform")
    return sp


@dataclass(eq=False)
class Volume:
    """Scalar 3D grid with spacing (mm/voxel) and a voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    voxel_to_world: AffineTransform = field(default_factory=AffineTransform.identity)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = _check_geometry(self.data, self.spacing, self.voxel_to_world)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.data.shape))

    def grid(self) -> "Grid":
        return Grid(self.dims, self.spacing, self.voxel_to_world)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.voxel_to_world)


@dataclass(eq=False)
class LabelVolume:
    """Integer-label 3D grid; values lie in {0, ..., label_count-1}, 0 = background."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    voxel_to_world: AffineTransform = field(default_factory=AffineTransform.identity)
    label_count: int = 2

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {self.data.dtype}")
        self.spacing = _check_geometry(self.data, self.spacing, self.voxel_to_world)
        if self.label_count < 1:
            raise ValueError("label_count must be positive")
        lo, hi = int(self.data.min()), int(self.data.max())
        if lo < 0 or hi >= self.label_count:
            raise ValueError(
                f"label values [{lo}, {hi}] outside [0, {self.label_count - 1}]"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.data.shape))

    def grid(self) -> "Grid":
        return Grid(self.dims, self.spacing, self.voxel_to_world)

    def with_data(self, data: np.ndarray, label_count: int | None = None) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.voxel_to_world,
                           label_count if label_count is not None else self.label_count)


AnyVolume = Union[Volume, LabelVolume]


class Grid(NamedTuple):
    """Target geometry for resampling: (dims, spacing, voxel_to_world)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxel_to_world: AffineTransform


def same_grid(a, b, tol: float = 1e-4) -> bool:
    """True when two volumes/grids share dims, spacing and affine (within tol mm)."""
    return (
        tuple(a.dims) == tuple(b.dims)
        and np.allclose(a.spacing, b.spacing, atol=tol)
        and np.allclose(a.voxel_to_world.matrix, b.voxel_to_world.matrix, atol=tol)
    )


def require_same_grid(a, b, what: str = "volumes") -> None:
    if not same_grid(a, b):
        raise GeometryError(f"{what} are not on the same grid: "
                            f"{tuple(a.dims)} vs {tuple(b.dims)}")


_SLAB = 32  # z-slices resampled per chunk to bound transient memory


def resample(src: AnyVolume, transform: AffineTransform, target_grid,
             interp: str = "trilinear") -> AnyVolume:
    """Resample src onto target_grid through a src-world -> target-world affine.

    Each output voxel is sampled at the source location obtained by pulling
    its world coordinate back through the inverse of `transform`;
    out-of-bounds samples are 0. Labels require `interp="nearest"`.
    """
    is_labels = isinstance(src, LabelVolume)
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if is_labels and interp != "nearest":
        raise InvalidInterpolationError("label volumes must use nearest interpolation")
    if hasattr(target_grid, "grid"):
        target_grid = target_grid.grid()
    dims = tuple(int(d) for d in target_grid.dims)

    # target voxel -> target world -> src world -> src voxel, one 4x4
    src_from_target = compose(
        invert(src.voxel_to_world),
        compose(invert(transform), target_grid.voxel_to_world),
    ).matrix

    if interp == "nearest":
        out = np.zeros(dims, dtype=src.data.dtype)
    else:
        out = np.zeros(dims, dtype=np.float32)

    nx, ny = dims[0], dims[1]
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ix = ix.ravel().astype(np.float64)
    iy = iy.ravel().astype(np.float64)
    for z0 in range(0, dims[2], _SLAB):
        z1 = min(z0 + _SLAB, dims[2])
        zs = np.arange(z0, z1, dtype=np.float64)
        n_xy = nx * ny
        coords = np.empty((3, n_xy * len(zs)))
        for k, z in enumerate(zs):
            s = slice(k * n_xy, (k + 1) * n_xy)
            coords[0, s] = ix
            coords[1, s] = iy
            coords[2, s] = z
        coords = src_from_target[:3, :3] @ coords + src_from_target[:3, 3:4]
        if interp == "nearest":
            values, _ = sample_nearest(src.data, coords)
        else:
            values, _ = sample_trilinear(src.data, coords)
            values = values.astype(np.float32)
        out[:, :, z0:z1] = values.reshape(len(zs), nx, ny).transpose(1, 2, 0)

    if is_labels:
        return LabelVolume(out, target_grid.spacing, target_grid.voxel_to_world,
                           src.label_count)
    return Volume(out, target_grid.spacing, target_grid.voxel_to_world)
