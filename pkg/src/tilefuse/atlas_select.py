"""PCA-manifold atlas selection.

Masked, z-normalized atlas intensities become points in a PCA space built
from their singular decomposition; a test scan is projected into that space
and the nearest atlases by Euclidean distance are selected. All nontrivial
components are kept, so projection-space distances reproduce the original
centered-vector distances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError
from .harmonize import BrainMask, znormalize
from .volume import Volume, require_same_grid

log = logging.getLogger(__name__)

DEFAULT_SELECT = 15
_DEGENERATE_TOL = 1e-9


@dataclass(eq=False)
class PcaManifold:
    mask: BrainMask
    mean: np.ndarray                  # (n_voxels,)
    components: np.ndarray            # (n_components, n_voxels), orthonormal rows
    atlas_projections: np.ndarray     # (n_atlases, n_components)
    atlas_ids: tuple[str, ...]
    degenerate: bool = False

    @property
    def n_atlases(self) -> int:
        return len(self.atlas_ids)


def _masked_vector(vol: Volume, mask: BrainMask) -> np.ndarray:
    require_same_grid(vol, mask, "atlas and mask")
    return znormalize(vol).data[mask.data].astype(np.float64)


def build_manifold(atlas_volumes: list[tuple[str, Volume]],
                   mask: BrainMask) -> PcaManifold:
    """Center masked intensity vectors and keep all n-1 SVD components."""
    if len(atlas_volumes) < 2:
        raise InsufficientDataError(
            f"PCA manifold needs >= 2 atlases, got {len(atlas_volumes)}"
        )
    ids = tuple(name for name, _ in atlas_volumes)
    x = np.stack([_masked_vector(vol, mask) for _, vol in atlas_volumes])
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    n_keep = len(ids) - 1
    components = vt[:n_keep]
    degenerate = bool(s[0] <= _DEGENERATE_TOL)
    if degenerate:
        log.warning("atlas set has no intensity variation; manifold is degenerate")
    projections = centered @ components.T
    return PcaManifold(mask, mean, components, projections, ids, degenerate)


def project(manifold: PcaManifold, test: Volume) -> np.ndarray:
    vec = _masked_vector(test, manifold.mask)
    return (vec - manifold.mean) @ manifold.components.T


def select(manifold: PcaManifold, test: Volume,
           n: int = DEFAULT_SELECT) -> list[str]:
    """Ids of the n nearest atlases in projection space, ascending distance.

    Distance ties (and the degenerate manifold) fall back to atlas id order.
    """
    if n > manifold.n_atlases:
        raise InsufficientDataError(
            f"cannot select {n} of {manifold.n_atlases} atlases"
        )
    if manifold.degenerate:
        log.warning("degenerate manifold: selecting atlases in id order")
        return list(manifold.atlas_ids[:n])
    p = project(manifold, test)
    d = np.linalg.norm(manifold.atlas_projections - p, axis=1)
    order = np.argsort(d, kind="stable")
    return [manifold.atlas_ids[i] for i in order[:n]]


def save_manifold(manifold: PcaManifold, directory) -> dict:
    """Write .npy arrays into directory; returns name->filename mapping."""
    from pathlib import Path

    directory = Path(directory)
    files = {
        "mean": "manifold_mean.npy",
        "components": "manifold_components.npy",
        "projections": "manifold_projections.npy",
    }
    np.save(directory / files["mean"], manifold.mean)
    np.save(directory / files["components"], manifold.components)
    np.save(directory / files["projections"], manifold.atlas_projections)
    return files


def load_manifold(directory, files: dict, atlas_ids: list[str],
                  mask: BrainMask) -> PcaManifold:
    from pathlib import Path

    directory = Path(directory)
    mean = np.load(directory / files["mean"])
    components = np.load(directory / files["components"])
    projections = np.load(directory / files["projections"])
    degenerate = bool(
        components.size == 0
        or np.linalg.norm(projections) <= _DEGENERATE_TOL
    )
    return PcaManifold(mask, mean, components, projections, tuple(atlas_ids),
                       degenerate)
