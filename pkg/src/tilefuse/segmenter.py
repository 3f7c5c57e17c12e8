"""Per-tile segmentation backends.

Three interchangeable backends produce a label map for one tile: an
atlas-prior mode vote, a patch k-NN matcher, and an external process driven
by a file-based manifest protocol (the slot where a learned model plugs in).
All are deterministic for fixed inputs.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientDataError,
    PluginFailureError,
    PluginTimeoutError,
    ProtocolViolationError,
)
from .nifti import load_nifti, store_nifti
from .tiling import SubSpace
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_PATCH_MM = 3.0
DEFAULT_SEARCH_MM = 5.0
DEFAULT_KNN_ATLASES = 15
DEFAULT_PLUGIN_TIMEOUT = 300.0


def mm_to_odd_voxels(mm: float, spacing) -> int:
    """Window edge in voxels: round(mm / mean spacing), forced odd, >= 1."""
    edge = int(round(mm / float(np.mean(spacing))))
    if edge < 1:
        return 1
    return edge if edge % 2 == 1 else edge + 1


@dataclass(frozen=True)
class SegmenterSpec:
    """Which backend to run and its parameters."""

    kind: str = "prior"                 # prior | knn | external
    patch_edge: int = 3                 # knn: cube edge, voxels, odd
    search_edge: int = 5                # knn: search window edge, voxels, odd
    n_atlases: int = DEFAULT_KNN_ATLASES
    command: str = ""                   # external: command line prefix
    timeout: float = DEFAULT_PLUGIN_TIMEOUT

    def __post_init__(self):
        if self.kind not in ("prior", "knn", "external"):
            raise ValueError(f"unknown segmenter kind {self.kind!r}")
        if self.kind == "knn":
            for name, edge in (("patch_edge", self.patch_edge),
                               ("search_edge", self.search_edge)):
                if edge < 1 or edge % 2 == 0:
                    raise ValueError(f"{name} must be odd and >= 1, got {edge}")
            if self.search_edge < self.patch_edge:
                raise ValueError("search_edge must be >= patch_edge")
        if self.kind == "external" and not self.command:
            raise ValueError("external segmenter needs a command")


@dataclass(eq=False)
class TileTask:
    """One tile's worth of work: geometry, harmonized intensities, label count."""

    tile: SubSpace
    intensity: Volume
    label_count: int

    def __post_init__(self):
        if tuple(self.intensity.dims) != tuple(self.tile.size):
            raise ValueError(
                f"tile intensity dims {self.intensity.dims} != size {self.tile.size}"
            )


def segment_prior(task: TileTask,
                  atlases: list[tuple[Volume, LabelVolume]]) -> LabelVolume:
    """Most frequent atlas label per voxel; smaller label wins ties."""
    if not atlases:
        raise InsufficientDataError("prior segmenter needs at least one atlas")
    sl = task.tile.slices()
    crops = [lab.data[sl] for _, lab in atlases]
    best_count = np.zeros(task.tile.size, dtype=np.int32)
    best_label = np.zeros(task.tile.size, dtype=np.int32)
    for l in range(task.label_count):
        cnt = np.zeros(task.tile.size, dtype=np.int32)
        for crop in crops:
            cnt += crop == l
        if l == 0:
            best_count = cnt
        else:
            better = cnt > best_count
            best_label[better] = l
            best_count[better] = cnt[better]
    return LabelVolume(best_label, task.intensity.spacing,
                       task.intensity.voxel_to_world, task.label_count)


def _clamped_axes(shape, region, offset):
    """Per-axis index arrays for region+offset, clamped to shape."""
    return tuple(
        np.clip(np.arange(r.start, r.stop) + o, 0, n - 1)
        for r, o, n in zip(region, offset, shape)
    )


def _gather(data: np.ndarray, axes) -> np.ndarray:
    return data[np.ix_(*axes)]


def segment_knn(task: TileTask, atlases: list[tuple[Volume, LabelVolume]],
                spec: SegmenterSpec) -> LabelVolume:
    """Non-local patch matching against the atlases.

    For every tile voxel, the atlas patch (edge `patch_edge`, L2 intensity
    distance) nearest to the target patch is searched over all centers in a
    `search_edge` window around the corresponding canonical coordinate; the
    label at the winning center is copied. Patches and centers clamp to
    their own volume's bounds. Ties break on the lexicographically smallest
    (atlas index, center offset) in (dx, dy, dz) order.
    """
    if not atlases:
        raise InsufficientDataError("knn segmenter needs at least one atlas")
    tile = task.tile
    region = tuple(slice(c, c + s) for c, s in zip(tile.corner, tile.size))
    target = task.intensity.data.astype(np.float64)

    pr = spec.patch_edge // 2
    sr = spec.search_edge // 2
    patch_offsets = [(dx, dy, dz)
                     for dx in range(-pr, pr + 1)
                     for dy in range(-pr, pr + 1)
                     for dz in range(-pr, pr + 1)]
    center_offsets = [(dx, dy, dz)
                      for dx in range(-sr, sr + 1)
                      for dy in range(-sr, sr + 1)
                      for dz in range(-sr, sr + 1)]

    # target patches clamp to the tile crop itself
    tile_region = tuple(slice(0, s) for s in tile.size)
    target_patches = [
        _gather(target, _clamped_axes(target.shape, tile_region, po))
        for po in patch_offsets
    ]

    best_dist = np.full(tile.size, np.inf)
    best_label = np.zeros(tile.size, dtype=np.int32)
    for intensity, labels in atlases:
        adata = intensity.data.astype(np.float64)
        for co in center_offsets:
            # centers clamp to the canonical volume, patches clamp around
            # the clamped center
            center_axes = _clamped_axes(adata.shape, region, co)
            dist = np.zeros(tile.size)
            for po, tpatch in zip(patch_offsets, target_patches):
                patch_axes = tuple(
                    np.clip(ax + o, 0, n - 1)
                    for ax, o, n in zip(center_axes, po, adata.shape)
                )
                diff = _gather(adata, patch_axes) - tpatch
                dist += diff * diff
            better = dist < best_dist
            if better.any():
                center_labels = _gather(labels.data, center_axes)
                best_label[better] = center_labels[better]
                best_dist[better] = dist[better]
    return LabelVolume(best_label, task.intensity.spacing,
                       task.intensity.voxel_to_world, task.label_count)


def build_manifest(task: TileTask, canonical_dims) -> dict:
    """The JSON document handed to external plugins (key set is the contract)."""
    return {
        "protocol_version": PROTOCOL_VERSION,
        "tile_index": task.tile.index,
        "corner": list(task.tile.corner),
        "size": list(task.tile.size),
        "label_count": task.label_count,
        "input_volume": "input.nii",
        "output_volume": "output.nii",
        "canonical_dims": list(canonical_dims),
    }


def segment_external(task: TileTask, spec: SegmenterSpec, canonical_dims,
                     work_root=None) -> LabelVolume:
    """Run one plugin invocation in a fresh work directory.

    Writes input.nii and manifest.json, invokes `command <manifest>`, then
    validates and loads output.nii. Failures carry the tile index.
    """
    if work_root is not None:
        Path(work_root).mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix=f"tile_{task.tile.index:03d}_",
                                    dir=work_root))
    manifest = build_manifest(task, canonical_dims)
    store_nifti(task.intensity, workdir / manifest["input_volume"])
    manifest_path = workdir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))

    argv = shlex.split(spec.command) + [str(manifest_path)]
    log.debug("tile %d: running %s", task.tile.index, argv)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True,
                              timeout=spec.timeout)
    except subprocess.TimeoutExpired:
        raise PluginTimeoutError(task.tile.index, spec.timeout)
    except OSError as exc:
        raise PluginFailureError(task.tile.index, -1, str(exc))
    if proc.returncode != 0:
        raise PluginFailureError(task.tile.index, proc.returncode, proc.stderr)

    out_path = workdir / manifest["output_volume"]
    if not out_path.exists():
        raise ProtocolViolationError(
            f"plugin wrote no {manifest['output_volume']} for tile "
            f"{task.tile.index}", task.tile.index)
    try:
        result = load_nifti(out_path, as_labels=True,
                            label_count=task.label_count)
    except Exception as exc:
        raise ProtocolViolationError(
            f"tile {task.tile.index}: plugin output invalid: {exc}",
            task.tile.index)
    if tuple(result.dims) != tuple(task.tile.size):
        raise ProtocolViolationError(
            f"tile {task.tile.index}: plugin output dims {result.dims} != "
            f"tile size {task.tile.size}", task.tile.index)
    return LabelVolume(result.data, task.intensity.spacing,
                       task.intensity.voxel_to_world, task.label_count)
