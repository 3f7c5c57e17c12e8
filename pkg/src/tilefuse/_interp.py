"""Low-level array sampling shared by resampling and registration.

Coordinates are continuous voxel indices, shape (3, n), x/y/z rows.
Out-of-bounds samples are reported through the validity mask; callers
decide the fill value (0 everywhere in this package).
"""

from __future__ import annotations

import numpy as np


def sample_nearest(data: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor lookup, rounding halves up (floor(c + 0.5))."""
    idx = np.floor(coords + 0.5).astype(np.int64)
    valid = np.ones(coords.shape[1], dtype=bool)
    for ax in range(3):
        valid &= (idx[ax] >= 0) & (idx[ax] < data.shape[ax])
    out = np.zeros(coords.shape[1], dtype=data.dtype)
    if valid.any():
        out[valid] = data[idx[0, valid], idx[1, valid], idx[2, valid]]
    return out, valid


def sample_trilinear(data: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation in float64; valid iff 0 <= c <= dim-1 per axis."""
    shape = data.shape
    valid = np.ones(coords.shape[1], dtype=bool)
    for ax in range(3):
        valid &= (coords[ax] >= 0.0) & (coords[ax] <= shape[ax] - 1)
    c = np.where(valid[None, :], coords, 0.0)

    i0 = np.empty_like(c, dtype=np.int64)
    i1 = np.empty_like(c, dtype=np.int64)
    f = np.empty_like(c)
    for ax in range(3):
        lo = np.floor(c[ax]).astype(np.int64)
        np.clip(lo, 0, max(shape[ax] - 2, 0), out=lo)
        i0[ax] = lo
        i1[ax] = np.minimum(lo + 1, shape[ax] - 1)
        f[ax] = c[ax] - lo

    acc = np.zeros(coords.shape[1], dtype=np.float64)
    src = data if data.dtype == np.float64 else data.astype(np.float64, copy=False)
    for corner in range(8):
        ix = i1[0] if corner & 1 else i0[0]
        iy = i1[1] if corner & 2 else i0[1]
        iz = i1[2] if corner & 4 else i0[2]
        w = (f[0] if corner & 1 else 1.0 - f[0]) \
            * (f[1] if corner & 2 else 1.0 - f[1]) \
            * (f[2] if corner & 4 else 1.0 - f[2])
        acc += w * src[ix, iy, iz]
    acc[~valid] = 0.0
    return acc, valid


def block_mean(data: np.ndarray, factor: int) -> np.ndarray:
    """Downsample by averaging factor^3 blocks; trailing remainders are cropped."""
    if factor == 1:
        return data.astype(np.float64, copy=False)
    nx, ny, nz = (s // factor for s in data.shape)
    if min(nx, ny, nz) == 0:
        raise ValueError(f"volume too small to downsample by {factor}")
    cropped = data[: nx * factor, : ny * factor, : nz * factor].astype(np.float64)
    return cropped.reshape(nx, factor, ny, factor, nz, factor).mean(axis=(1, 3, 5))
