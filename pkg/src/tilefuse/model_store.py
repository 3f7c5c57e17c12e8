"""Model directory produced by `fit` and consumed by `segment`.

Layout:
    manifest.json        ids, label count, file names, sha256 checksums
    template.nii         canonical-grid template intensity
    harmonization.bin    brain mask + mean sorted vector (binary sidecar)
    manifold_*.npy       PCA mean/components/projections
    atlases/<id>_intensity.nii, <id>_labels.nii

All files are written deterministically: refitting on identical inputs
reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import atlas_select, harmonize
from .errors import ConfigurationError, GeometryError, InsufficientDataError
from .harmonize import BrainMask, HarmonizationModel, build_mask, build_model
from .nifti import load_nifti, store_nifti
from .volume import LabelVolume, Volume, same_grid

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass(eq=False)
class ModelDir:
    path: Path
    template: Volume
    mask: BrainMask
    harmonization: HarmonizationModel
    manifold: atlas_select.PcaManifold
    atlases: list[tuple[str, Volume, LabelVolume]]
    label_count: int

    def atlas_pairs(self) -> list[tuple[Volume, LabelVolume]]:
        return [(vol, lab) for _, vol, lab in self.atlases]

    def atlas_by_id(self) -> dict[str, tuple[Volume, LabelVolume]]:
        return {name: (vol, lab) for name, vol, lab in self.atlases}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fit_model_dir(template: Volume,
                  atlases: list[tuple[str, Volume, LabelVolume]],
                  out_dir, label_count: int | None = None) -> Path:
    """Build mask, harmonization model and PCA manifold; write everything."""
    if len(atlases) < 2:
        raise InsufficientDataError(
            f"model fitting needs >= 2 atlases, got {len(atlases)}"
        )
    for name, vol, lab in atlases:
        if not name or not name.replace("_", "").replace("-", "").isalnum():
            raise ConfigurationError(f"atlas id {name!r} is not filename-safe")
        if not same_grid(template, vol) or not same_grid(template, lab):
            raise GeometryError(
               f"atlas '{name}' is not on the template grid "
               f"({vol.dims} / {lab.dims} vs {template.dims})"
            )
    if label_count is None:
        label_count = max(lab.label_count for _, _, lab in atlases)

    mask = build_mask([
        lab.with_data((lab.data > 0).astype(lab.data.dtype), label_count=2)
        for _, _, lab in atlases
    ])
    harmonization = build_model([vol for _, vol, _ in atlases], mask)
    manifold = atlas_select.build_manifold(
        [(name, vol) for name, vol, _ in atlases], mask)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "atlases").mkdir(exist_ok=True)

    files: dict[str, str] = {"template": "template.nii",
                             "harmonization": "harmonization.bin"}
    store_nifti(template, out / files["template"])
    harmonize.save_model(harmonization, out / files["harmonization"])
    manifold_files = atlas_select.save_manifold(manifold, out)
    atlas_entries = []
    for name, vol, lab in atlases:
        entry = {
            "id": name,
            "intensity": f"atlases/{name}_intensity.nii",
            "labels": f"atlases/{name}_labels.nii",
        }
        store_nifti(vol, out / entry["intensity"])
        store_nifti(lab, out / entry["labels"])
        atlas_entries.append(entry)

    tracked = list(files.values()) + list(manifold_files.values()) + [
        e[k] for e in atlas_entries for k in ("intensity", "labels")
    ]
    manifest = {
        "format_version": FORMAT_VERSION,
        "label_count": int(label_count),
        "files": files,
        "manifold_files": manifold_files,
        "atlases": atlas_entries,
        "checksums": {rel: _sha256(out / rel) for rel in sorted(tracked)},
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("model written to %s (%d atlases, L=%d)", out, len(atlases),
             label_count)
    return out


def load_model_dir(path, verify: bool = True) -> ModelDir:
    """Load a model directory, verifying content checksums by default."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigurationError(f"no model manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported model format {manifest.get('format_version')}"
        )
    if verify:
        for rel, expect in manifest["checksums"].items():
            actual = _sha256(root / rel)
            if actual != expect:
                raise ConfigurationError(
                    f"model file {rel} checksum mismatch (corrupted model dir?)"
                )

    template = load_nifti(root / manifest["files"]["template"])
    harmonization = harmonize.load_model(root / manifest["files"]["harmonization"])
    atlases = []
    for entry in manifest["atlases"]:
        vol = load_nifti(root / entry["intensity"])
        lab = load_nifti(root / entry["labels"], as_labels=True,
                         label_count=manifest["label_count"])
        atlases.append((entry["id"], vol, lab))
    manifold = atlas_select.load_manifold(
        root, manifest["manifold_files"],
        [e["id"] for e in manifest["atlases"]], harmonization.mask)
    return ModelDir(root, template, harmonization.mask, harmonization, manifold,
                    atlases, int(manifest["label_count"]))
