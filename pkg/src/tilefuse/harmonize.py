"""Sorted-intensity harmonization.

Scans already mapped to the canonical grid are z-normalized, their
brain-masked intensities sorted descending, and a robust linear fit maps the
scan's sorted vector onto the atlas-average sorted vector. The fitted
(gain, offset) pair is then applied voxelwise. The robust fit is
iteratively-reweighted least squares with Huber weights, tuning constant
1.345 and MAD/0.6745 residual scale, mirroring the classic robustfit
defaults.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateFitError, DegenerateInputError, EmptyMaskError
from .registration import AffineTransform
from .volume import LabelVolume, Volume, require_same_grid

log = logging.getLogger(__name__)

HUBER_C = 1.345
MAD_TO_SIGMA = 0.6745
MAX_ITERS = 50
COEF_TOL = 1e-6


@dataclass(eq=False)
class BrainMask:
    """Binary mask on the canonical grid."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    voxel_to_world: AffineTransform

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        self.voxel_count = int(self.data.sum())
        if self.voxel_count == 0:
            raise EmptyMaskError("mask has no voxels set")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(eq=False)
class HarmonizationModel:
    """Brain mask plus the atlas-average descending sorted intensity vector."""

    mask: BrainMask
    mean_sorted: np.ndarray

    def __post_init__(self):
        self.mean_sorted = np.asarray(self.mean_sorted, dtype=np.float64)
        if self.mean_sorted.shape != (self.mask.voxel_count,):
            raise ValueError(
                f"mean_sorted length {self.mean_sorted.size} != mask voxel count "
                f"{self.mask.voxel_count}"
            )
        if np.any(np.diff(self.mean_sorted) > 0):
            raise ValueError("mean_sorted must be non-increasing")


@dataclass(frozen=True)
class HarmonizationFit:
    beta0: float
    beta1: float
    iterations: int
    converged: bool


def znormalize(v: Volume) -> Volume:
    """Shift/scale to zero mean and unit population std over all voxels."""
    data = v.data.astype(np.float64)
    std = float(data.std())
    if std == 0.0:
        raise DegenerateInputError("cannot z-normalize a constant volume")
    return v.with_data((data - data.mean()) / std)


def build_mask(prob_maps: list[LabelVolume]) -> BrainMask:
    """Threshold the mean of binary maps at 0.5 (inclusive)."""
    if not prob_maps:
        raise DegenerateInputError("need at least one probability map")
    first = prob_maps[0]
    acc = np.zeros(first.dims, dtype=np.float64)
    for m in prob_maps:
        require_same_grid(first, m, "probability maps")
        acc += m.data > 0
    mask = acc / len(prob_maps) >= 0.5
    return BrainMask(mask, first.spacing, first.voxel_to_world)


def sorted_vector(v: Volume, mask: BrainMask) -> np.ndarray:
    """Masked intensities sorted largest to smallest."""
    require_same_grid(v, mask, "volume and mask")
    values = v.data[mask.data].astype(np.float64)
    return np.sort(values)[::-1].copy()


def build_model(atlas_volumes: list[Volume], mask: BrainMask) -> HarmonizationModel:
    """Average the z-normalized sorted vectors of all atlases."""
    if not atlas_volumes:
        raise DegenerateInputError("need at least one atlas")
    acc = np.zeros(mask.voxel_count, dtype=np.float64)
    for vol in atlas_volumes:
        acc += sorted_vector(znormalize(vol), mask)
    return HarmonizationModel(mask, acc / len(atlas_volumes))


def _huber_weights(resid: np.ndarray) -> np.ndarray:
    med = np.median(resid)
    scale = np.median(np.abs(resid - med)) / MAD_TO_SIGMA
    if scale < 1e-300:
        return np.ones_like(resid)
    u = np.abs(resid) / (HUBER_C * scale)
    w = np.ones_like(resid)
    big = u > 1.0
    w[big] = 1.0 / u[big]
    return w


def fit(model: HarmonizationModel, test_sorted: np.ndarray) -> HarmonizationFit:
    """Huber IRLS of mean_sorted on the scan's sorted vector."""
    y = model.mean_sorted
    x = np.asarray(test_sorted, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"sorted vector length {x.size} != model length {y.size}")
    if float(x.std()) == 0.0:
        raise DegenerateFitError("test sorted vector has zero variance")

    design = np.column_stack([np.ones_like(x), x])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITERS + 1):
        resid = y - design @ beta
        w = _huber_weights(resid)
        wx = design * w[:, None]
        new_beta = np.linalg.solve(design.T @ wx, wx.T @ y)
        delta = float(np.max(np.abs(new_beta - beta)))
        beta = new_beta
        if delta < COEF_TOL:
            converged = True
            break

    beta0, beta1 = float(beta[0]), float(beta[1])
    if not np.isfinite(beta1) or beta1 <= 0.0:
        log.warning("harmonization gain %.4g is not positive; marking fit unusable",
                    beta1)
        converged = False
    return HarmonizationFit(beta0, beta1, iterations, converged)


def apply(fit_result: HarmonizationFit, v: Volume) -> Volume:
    """Map every voxel through the fitted gain/offset."""
    if not fit_result.converged:
        raise DegenerateFitError("refusing to apply a non-converged fit")
    data = v.data.astype(np.float64) * fit_result.beta1 + fit_result.beta0
    return v.with_data(data)


_MODEL_MAGIC = b"TFHARM01"


def save_model(model: HarmonizationModel, path) -> None:
    """Binary sidecar: magic, mask geometry, bit-packed mask, float64 vector."""
    mask = model.mask
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<3I", *mask.dims))
        fh.write(struct.pack("<3d", *mask.spacing))
        fh.write(struct.pack("<16d", *mask.voxel_to_world.matrix.ravel()))
        fh.write(np.packbits(mask.data.ravel(order="F")).tobytes())
        fh.write(model.mean_sorted.astype("<f8").tobytes())


def load_model(path) -> HarmonizationModel:
    blob = Path(path).read_bytes()
    if blob[:8] != _MODEL_MAGIC:
        raise DegenerateInputError(f"{path} is not a harmonization model file")
    dims = struct.unpack_from("<3I", blob, 8)
    spacing = struct.unpack_from("<3d", blob, 20)
    affine = np.array(struct.unpack_from("<16d", blob, 44)).reshape(4, 4)
    n = int(np.prod(dims))
    packed = (n + 7) // 8
    bits = np.unpackbits(np.frombuffer(blob, np.uint8, packed, 172))[:n]
    mask_data = bits.astype(bool).reshape(dims, order="F")
    mask = BrainMask(mask_data, spacing, AffineTransform(affine))
    vec = np.frombuffer(blob, "<f8", mask.voxel_count, 172 + packed)
    return HarmonizationModel(mask, vec.copy())
