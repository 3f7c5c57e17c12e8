"""Reference tile segmenter speaking the manifest protocol.

Invoked as `tilefuse-ref-plugin <manifest.json>`. The manifest names an
input intensity NIfTI and an output label NIfTI, both relative to the
manifest's directory; this process never touches anything outside it.

Two deterministic labeling rules are built in, selected by the
TILEFUSE_REF_PLUGIN_RULE environment variable:

  quantile (default)  per-voxel quantile binning of intensity into
                      label_count equal-mass bins:
                          thresholds = quantile(data, i/L for i in 1..L-1)
                          label      = searchsorted(thresholds, v, 'right')
  knn                 patch matching against a small procedural atlas

A learned model would slot in exactly where those rules sit: read the tile,
produce labels of identical dims, write them, exit 0.

Exit codes: 0 ok, 2 malformed manifest, 3 I/O failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import numpy as np

from .nifti_io import NiftiError, read_volume, write_labels

PROTOCOL_VERSION = 1
REQUIRED_KEYS = (
    "protocol_version", "tile_index", "corner", "size", "label_count",
    "input_volume", "output_volume", "canonical_dims",
)

EXIT_OK = 0
EXIT_BAD_MANIFEST = 2
EXIT_IO_FAILURE = 3


class ManifestError(Exception):
    pass


def _resolve_inside(base: Path, relative: str) -> Path:
    candidate = (base / relative).resolve()
    if not candidate.is_relative_to(base.resolve()):
        raise ManifestError(f"path {relative!r} escapes the manifest directory")
    return candidate


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}")
    missing = [k for k in REQUIRED_KEYS if k not in doc]
    if missing:
        raise ManifestError(f"manifest missing keys: {missing}")
    if doc["protocol_version"] != PROTOCOL_VERSION:
        raise ManifestError(
            f"unsupported protocol_version {doc['protocol_version']}, "
            f"expected {PROTOCOL_VERSION}"
        )
    if int(doc["label_count"]) < 2:
        raise ManifestError("label_count must be >= 2")
    if len(doc["size"]) != 3 or any(int(s) < 1 for s in doc["size"]):
        raise ManifestError(f"bad tile size {doc['size']}")
    base = path.parent
    _resolve_inside(base, doc["input_volume"])
    _resolve_inside(base, doc["output_volume"])
    return doc, base


def quantile_labels(data: np.ndarray, label_count: int) -> np.ndarray:
    """Equal-mass intensity bins; bit-for-bit reproducible for equal input."""
    qs = np.arange(1, label_count) / label_count
    thresholds = np.quantile(data, qs, method="linear")
    return np.searchsorted(thresholds, data, side="right").astype(np.int32)


def _mini_atlas(dims=(16, 16, 16), label_count=4):
    """Procedural paired atlas: radial intensity ramp with shell labels."""
    center = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims),
                        indexing="ij")
    rho = np.sqrt(sum(((g - c) / (0.5 * d)) ** 2
                      for g, c, d in zip(grids, center, dims)))
    intensity = np.clip(1.0 - rho, 0.0, 1.0)
    edges = np.arange(1, label_count) / label_count
    labels = np.searchsorted(edges, intensity, side="right").astype(np.int32)
    return intensity, labels


def knn_labels(data: np.ndarray, label_count: int,
               patch_r: int = 1, search_r: int = 1) -> np.ndarray:
    """Patch match each voxel against the bundled mini-atlas.

    Input is z-scored, voxel positions map proportionally onto the atlas
    grid, and the atlas label at the best-matching patch center is copied.
    Intended as a stand-in for a learned per-tile model, desk scale only.
    """
    atlas_int, atlas_lab = _mini_atlas(label_count=max(label_count, 2))
    atlas_lab = np.minimum(atlas_lab, label_count - 1)
    adims = atlas_int.shape
    std = data.std()
    z = (data - data.mean()) / (std if std > 0 else 1.0)
    z = z * 0.25 + 0.5  # roughly the atlas intensity range

    out = np.empty(data.shape, dtype=np.int32)
    scale = [(a - 1) / max(d - 1, 1) for a, d in zip(adims, data.shape)]
    for x in range(data.shape[0]):
        for y in range(data.shape[1]):
            for z_i in range(data.shape[2]):
                ax = int(round(x * scale[0]))
                ay = int(round(y * scale[1]))
                az = int(round(z_i * scale[2]))
                best = (np.inf, 0)
                for dx in range(-search_r, search_r + 1):
                    for dy in range(-search_r, search_r + 1):
                        for dz in range(-search_r, search_r + 1):
                            cx = min(max(ax + dx, 0), adims[0] - 1)
                            cy = min(max(ay + dy, 0), adims[1] - 1)
                            cz = min(max(az + dz, 0), adims[2] - 1)
                            dist = 0.0
                            for px in range(-patch_r, patch_r + 1):
                                for py in range(-patch_r, patch_r + 1):
                                    for pz in range(-patch_r, patch_r + 1):
                                        tx = min(max(x + px, 0), data.shape[0] - 1)
                                        ty = min(max(y + py, 0), data.shape[1] - 1)
                                        tz = min(max(z_i + pz, 0), data.shape[2] - 1)
                                        qx = min(max(cx + px, 0), adims[0] - 1)
                                        qy = min(max(cy + py, 0), adims[1] - 1)
                                        qz = min(max(cz + pz, 0), adims[2] - 1)
                                        d = atlas_int[qx, qy, qz] - z[tx, ty, tz]
                                        dist += d * d
                            if dist < best[0]:
                                best = (dist, int(atlas_lab[cx, cy, cz]))
                out[x, y, z_i] = best[1]
    return out


def run_plugin(manifest_path, rule: str | None = None) -> int:
    """Process one tile; returns the process exit code."""
    try:
        manifest, base = load_manifest(manifest_path)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_BAD_MANIFEST

    rule = rule or os.environ.get("TILEFUSE_REF_PLUGIN_RULE", "quantile")
    if rule not in ("quantile", "knn"):
        print(f"unknown rule {rule!r}", file=sys.stderr)
        return EXIT_BAD_MANIFEST

    try:
        data, spacing = read_volume(base / manifest["input_volume"])
    except (OSError, NiftiError) as exc:
        print(f"cannot read input volume: {exc}", file=sys.stderr)
        return EXIT_IO_FAILURE
    if list(data.shape) != list(manifest["size"]):
        print(f"input dims {data.shape} disagree with manifest size "
              f"{manifest['size']}", file=sys.stderr)
        return EXIT_BAD_MANIFEST

    label_count = int(manifest["label_count"])
    if rule == "quantile":
        labels = quantile_labels(data, label_count)
    else:
        labels = knn_labels(data, label_count)

    try:
        write_labels(base / manifest["output_volume"], labels, spacing,
                     label_count)
    except (OSError, NiftiError) as exc:
        print(f"cannot write output volume: {exc}", file=sys.stderr)
        return EXIT_IO_FAILURE
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: tilefuse-ref-plugin <manifest.json>", file=sys.stderr)
        return EXIT_BAD_MANIFEST
    return run_plugin(argv[0])


if __name__ == "__main__":
    sys.exit(main())
