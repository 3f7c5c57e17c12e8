"""Majority-vote fusion of overlapping tile segmentations.

Votes are unweighted indicator counts per label over the tiles covering each
voxel; the winner is the smallest label achieving the maximum count, so the
result is invariant to tile order. Space outside all tiles receives
background (0) and is counted as a warning, never fused.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, LabelRangeError
from .registration import AffineTransform
from .tiling import SubSpace, TileLattice
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)


def _check_tiles(tile_segs, lat: TileLattice, label_count: int):
    by_index = {t.index: t for t in lat.tiles}
    seen = set()
    for sub, seg in tile_segs:
        ref = by_index.get(sub.index)
        if ref is None or ref != sub or sub.index in seen:
            raise GeometryError(f"sub-space {sub} does not match the lattice")
        seen.add(sub.index)
        if tuple(seg.dims) != tuple(sub.size):
            raise GeometryError(
                f"tile {sub.index}: segmentation dims {seg.dims} != size {sub.size}"
            )
        if int(seg.data.max()) >= label_count:
            raise LabelRangeError(
                f"tile {sub.index}: label {int(seg.data.max())} >= L={label_count}"
            )
    if len(seen) != len(lat.tiles):
        raise GeometryError(
            f"need one segmentation per tile: got {len(seen)} of {len(lat.tiles)}"
        )


def _coverage(lat: TileLattice) -> np.ndarray:
    cov = np.zeros(lat.canonical_dims, dtype=np.int32)
    for tile in lat.tiles:
        cov[tile.slices()] += 1
    return cov


def fuse(tile_segs: list[tuple[SubSpace, LabelVolume]], lat: TileLattice,
         label_count: int, return_confidence: bool = False):
    """Fuse per-tile label maps into one canonical-grid segmentation.

    With return_confidence=True also returns winning-votes/coverage as a
    float32 Volume (0 where uncovered).
    """
    _check_tiles(tile_segs, lat, label_count)
    dims = lat.canonical_dims
    best_count = np.zeros(dims, dtype=np.int32)
    best_label = np.zeros(dims, dtype=np.int32)

    for l in range(label_count):
        cnt = np.zeros(dims, dtype=np.int32)
        for sub, seg in tile_segs:
            cnt[sub.slices()] += seg.data == l
        if l == 0:
            best_count = cnt
        else:
            better = cnt > best_count
            best_label[better] = l
            best_count[better] = cnt[better]

    cov = _coverage(lat)
    uncovered = int((cov == 0).sum())
    if uncovered:
        log.warning("%d voxels are covered by no tile; set to background", uncovered)
        best_label[cov == 0] = 0

    # reconstruct the canonical affine from the lowest-index tile so the
    # result is bit-identical under any permutation of tile_segs
    sub0, seg0 = min(tile_segs, key=lambda pair: pair[0].index)
    shift = np.eye(4)
    shift[:3, 3] = -np.array(sub0.corner, dtype=np.float64)
    canonical_affine = seg0.voxel_to_world.matrix @ shift

    fused = LabelVolume(best_label, seg0.spacing, AffineTransform(canonical_affine),
                        label_count)
    if not return_confidence:
        return fused
    conf = np.where(cov > 0, best_count / np.maximum(cov, 1), 0.0)
    confidence = Volume(conf.astype(np.float32), seg0.spacing, fused.voxel_to_world)
    return fused, confidence


@dataclass(eq=False)
class VoteTally:
    """Per-label vote counts over the canonical grid (diagnostics, desk scale)."""

    label_count: int
    coverage: np.ndarray
    counts: dict[int, np.ndarray] = field(default_factory=dict)

    def votes_at(self, x: int, y: int, z: int) -> dict[int, int]:
        """Labels with nonzero votes at one voxel; empty when uncovered."""
        return {
            l: int(c[x, y, z]) for l, c in sorted(self.counts.items())
            if c[x, y, z] > 0
        }

    def argmax_min_tie(self) -> np.ndarray:
        """Winning label per voxel (smallest on ties), 0 where uncovered."""
        dims = self.coverage.shape
        best_count = np.zeros(dims, dtype=np.int32)
        best_label = np.zeros(dims, dtype=np.int32)
        for l in sorted(self.counts):
            cnt = self.counts[l]
            if l == 0:
                best_count = cnt.copy()
            else:
                better = cnt > best_count
                best_label[better] = l
                best_count[better] = cnt[better]
        best_label[self.coverage == 0] = 0
        return best_label


def vote_counts(tile_segs: list[tuple[SubSpace, LabelVolume]], lat: TileLattice,
                label_count: int) -> VoteTally:
    """Expose the per-label vote sums behind fuse()."""
    _check_tiles(tile_segs, lat, label_count)
    dims = lat.canonical_dims
    tally = VoteTally(label_count, _coverage(lat))
    for l in range(label_count):
        cnt = np.zeros(dims, dtype=np.int32)
        for sub, seg in tile_segs:
            cnt[sub.slices()] += seg.data == l
        if cnt.any():
            tally.counts[l] = cnt
    return tally
