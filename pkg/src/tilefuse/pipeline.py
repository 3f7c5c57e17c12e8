"""End-to-end orchestration: fit, segment, batch, evaluate.

`run_segment` executes the full chain: optional pre-hook, affine
registration to the model template, trilinear resample onto the canonical
grid, z-normalization, sorted-intensity harmonization, tile lattice
construction, per-tile segmentation (parallel up to `jobs`), majority-vote
fusion, nearest-neighbor inverse mapping back to the native grid, and the QA
report. Outputs are bit-identical across parallelism levels.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import shlex
import shutil
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import atlas_select, harmonize
from .errors import ConfigurationError, StageError, TilefuseError
from .fusion import fuse
from .model_store import load_model_dir
from .nifti import load_nifti, store_nifti
from .registration import (
    RegistrationConfig,
    estimate_affine,
    invert,
    save_transform,
)
from .report import RunInfo, emit_report
from .segmenter import (
    SegmenterSpec,
    TileTask,
    segment_external,
    segment_knn,
    segment_prior,
)
from .tiling import TileLattice, extract_tile, make_lattice, preset_lattice
from .volume import LabelVolume, Volume, resample

log = logging.getLogger(__name__)

LOW_SIMILARITY = 0.2


@dataclass
class PipelineConfig:
    """Segmentation run configuration; JSON file fields map 1:1 to these."""

    model_dir: str = ""
    output_dir: str = "tilefuse_out"
    lattice: str = "slant27"               # slant8 | slant27 | custom
    tile_counts: tuple[int, int, int] | None = None
    tile_size: tuple[int, int, int] | None = None
    segmenter: str = "prior"               # prior | knn | external
    plugin_cmd: str = ""
    plugin_timeout: float = 300.0
    label_count: int | None = None         # default: from the model
    jobs: int = 1
    pre_hook: str = ""
    keep_intermediates: bool = True
    knn_patch_edge: int = 3
    knn_search_edge: int = 5
    select_atlases: int = atlas_select.DEFAULT_SELECT
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def segmenter_spec(self) -> SegmenterSpec:
        if self.segmenter == "external":
            return SegmenterSpec(kind="external", command=self.plugin_cmd,
                                 timeout=self.plugin_timeout)
        if self.segmenter == "knn":
            return SegmenterSpec(kind="knn", patch_edge=self.knn_patch_edge,
                                 search_edge=self.knn_search_edge,
                                 n_atlases=self.select_atlases)
        if self.segmenter == "prior":
            return SegmenterSpec(kind="prior")
        raise ConfigurationError(f"unknown segmenter {self.segmenter!r}")

    def build_lattice(self, dims) -> TileLattice:
        if self.lattice in ("slant8", "slant27"):
            return preset_lattice(self.lattice, dims)
        if self.lattice == "custom":
            if not self.tile_counts or not self.tile_size:
                raise ConfigurationError(
                    "custom lattice needs tile_counts and tile_size")
            return make_lattice(dims, self.tile_counts, self.tile_size)
        raise ConfigurationError(f"unknown lattice {self.lattice!r}")


@dataclass
class SegmentResult:
    labels_native: LabelVolume
    confidence_native: Volume
    output_dir: Path
    similarity: float
    tile_count: int
    segmenter_invocations: int
    stage_seconds: list[tuple[str, float]]
    total_seconds: float
    warnings: list[str]


class _StageClock:
    def __init__(self):
        self.entries: list[tuple[str, float]] = []
        self._t0 = time.perf_counter()

    def run(self, name: str, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except TilefuseError as exc:
            tile = getattr(exc, "tile_index", None)
            raise StageError(name, exc, tile) from exc
        self.entries.append((name, time.perf_counter() - start))
        return result

    def total(self) -> float:
        return time.perf_counter() - self._t0


def _run_pre_hook(command: str, input_path: Path, work_dir: Path) -> Path:
    """Invoke `command <in> <out>`; the hook's output feeds the pipeline."""
    out_path = work_dir / "prehook_output.nii"
    argv = shlex.split(command) + [str(input_path), str(out_path)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ConfigurationError(
            f"pre-hook exited {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    if not out_path.exists():
        raise ConfigurationError("pre-hook produced no output file")
    return out_path


# test seam: a backend is any callable producing a tile label map
TileBackend = Callable[[TileTask], LabelVolume]


def _make_backend(spec: SegmenterSpec,
                  selected: list[tuple[Volume, LabelVolume]],
                  canonical_dims, work_root) -> TileBackend:
    if spec.kind == "prior":
        return lambda task: segment_prior(task, selected)
    if spec.kind == "knn":
        return lambda task: segment_knn(task, selected, spec)
    return lambda task: segment_external(task, spec, canonical_dims,
                                         work_root=work_root)


def _segment_tiles(tasks: list[TileTask], backend: TileBackend,
                   jobs: int) -> list[LabelVolume]:
    if jobs <= 1:
        return [backend(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(backend, tasks))


def run_segment(input_path, config: PipelineConfig,
                backend_override: TileBackend | None = None) -> SegmentResult:
    input_path = Path(input_path)
    if not input_path.is_file():
        raise ConfigurationError(f"input scan {input_path} does not exist")
    model = load_model_dir(config.model_dir)
    label_count = config.label_count or model.label_count
    if label_count < 2:
        raise ConfigurationError("label_count must be >= 2")
    lattice = config.build_lattice(model.template.dims)
    spec = config.segmenter_spec()

    out_dir = Path(config.output_dir)
    inter_dir = out_dir / "intermediates"
    inter_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(_config_to_json(config), indent=2, sort_keys=True) + "\n")
    (inter_dir / "lattice.json").write_text(lattice.to_json() + "\n")

    warnings: list[str] = []
    clock = _StageClock()

    scan_path = input_path
    if config.pre_hook:
        scan_path = clock.run("pre_hook", _run_pre_hook, config.pre_hook,
                              input_path, inter_dir)
    native = clock.run("load_input", load_nifti, scan_path)
    if isinstance(native, LabelVolume):
        raise ConfigurationError(f"{scan_path} is a label volume, not a scan")

    transform, similarity = clock.run(
        "register", estimate_affine, native, model.template, config.registration)
    if similarity < LOW_SIMILARITY:
        warnings.append(
            f"registration similarity {similarity:.3f} is below "
            f"{LOW_SIMILARITY}; output is unlikely to be usable")
        log.warning(warnings[-1])

    def _resample_canonical():
        vol = resample(native, transform, model.template.grid(), "trilinear")
        store_nifti(vol, inter_dir / "canonical_input.nii")
        save_transform(transform, out_dir / "transform.txt")
        return vol

    canonical = clock.run("resample_canonical", _resample_canonical)
    znormed = clock.run("znormalize", harmonize.znormalize, canonical)

    def _harmonize():
        vs = harmonize.sorted_vector(znormed, model.mask)
        fit_result = harmonize.fit(model.harmonization, vs)
        vol = harmonize.apply(fit_result, znormed)
        store_nifti(vol, inter_dir / "harmonized.nii")
        return vol

    harmonized = clock.run("harmonize", _harmonize)

    def _select():
        ids = atlas_select.select(
            model.manifold, harmonized,
            n=min(config.select_atlases, model.manifold.n_atlases))
        by_id = model.atlas_by_id()
        return [by_id[i] for i in ids]

    selected = clock.run("atlas_selection", _select) \
        if spec.kind in ("prior", "knn") else []
    if model.manifold.degenerate and spec.kind in ("prior", "knn"):
        warnings.append("atlas manifold is degenerate; selection fell back "
                        "to id order")

    tasks = clock.run("extract_tiles", lambda: [
        TileTask(tile, extract_tile(harmonized, tile), label_count)
        for tile in lattice.tiles
    ])
    backend = backend_override or _make_backend(
        spec, selected, lattice.canonical_dims, inter_dir / "plugin")
    calls: list[int] = []  # list.append is atomic under the GIL

    def counted(task: TileTask) -> LabelVolume:
        calls.append(task.tile.index)
        return backend(task)

    def _run_tiles():
        labels = _segment_tiles(tasks, counted, config.jobs)
        tiles_dir = inter_dir / "tiles"
        tiles_dir.mkdir(exist_ok=True)
        for tile, seg in zip(lattice.tiles, labels):
            store_nifti(seg, tiles_dir / f"tile_{tile.index:03d}.nii")
        return labels

    tile_labels = clock.run("segment_tiles", _run_tiles)
    tile_segs = list(zip(lattice.tiles, tile_labels))

    def _fuse():
        out = fuse(tile_segs, lattice, label_count, True)
        store_nifti(out[0], inter_dir / "fused_canonical.nii")
        store_nifti(out[1], inter_dir / "confidence_canonical.nii")
        return out

    fused, confidence = clock.run("fuse", _fuse)
    coverage_min = _lattice_min_coverage(lattice)
    if coverage_min == 0:
        warnings.append("lattice leaves uncovered voxels; they were set to 0")

    inverse = invert(transform)

    def _to_native():
        labels = resample(fused, inverse, native.grid(), "nearest")
        conf = resample(confidence, inverse, native.grid(), "nearest")
        return labels, conf

    labels_native, confidence_native = clock.run("inverse_resample", _to_native)

    def _store():
        store_nifti(labels_native, out_dir / "labels_native.nii")
        store_nifti(confidence_native, out_dir / "confidence_native.nii")

    clock.run("store_outputs", _store)

    info = RunInfo(
        scan_id=str(input_path),
        lattice_desc=f"{config.lattice} k={lattice.k} size={lattice.tile_size}",
        segmenter_desc=spec.kind if backend_override is None else "custom",
        stage_seconds=clock.entries,
        warnings=warnings,
        similarity=similarity,
    )

    def _report():
        info.total_seconds = clock.total()
        emit_report(labels_native, native, info, out_dir)

    clock.run("report", _report)
    total = clock.total()
    info.total_seconds = total

    if not config.keep_intermediates:
        shutil.rmtree(inter_dir, ignore_errors=True)

    return SegmentResult(
        labels_native=labels_native,
        confidence_native=confidence_native,
        output_dir=out_dir,
        similarity=similarity,
        tile_count=lattice.k,
        segmenter_invocations=len(calls),
        stage_seconds=clock.entries,
        total_seconds=total,
        warnings=warnings,
    )


def _lattice_min_coverage(lattice: TileLattice) -> int:
    cov = np.zeros(lattice.canonical_dims, dtype=np.int32)
    for tile in lattice.tiles:
        cov[tile.slices()] += 1
    return int(cov.min())


def _config_to_json(config: PipelineConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["registration"] = dataclasses.asdict(config.registration)
    return doc


def config_from_json(doc: dict) -> PipelineConfig:
    doc = dict(doc)
    reg = doc.pop("registration", None)
    for key in ("tile_counts", "tile_size"):
        if doc.get(key) is not None:
            doc[key] = tuple(doc[key])
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    config = PipelineConfig(**doc)
    if reg:
        config.registration = RegistrationConfig(**reg)
    return config


@dataclass
class BatchEntry:
    scan: str
    status: str
    seconds: float
    error: str = ""


def run_batch(scan_paths, config: PipelineConfig) -> list[BatchEntry]:
    """Segment many scans; failures are recorded, not fatal."""
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    entries = []
    for scan in scan_paths:
        scan = Path(scan)
        sub = dataclasses.replace(
            config, output_dir=str(out_root / scan.stem.replace(".nii", "")))
        start = time.perf_counter()
        try:
            run_segment(scan, sub)
            entries.append(BatchEntry(str(scan), "ok",
                                      time.perf_counter() - start))
        except Exception as exc:
            log.error("scan %s failed: %s", scan, exc)
            entries.append(BatchEntry(str(scan), "failed",
                                      time.perf_counter() - start, str(exc)))
    summary = out_root / "batch_summary.csv"
    with open(summary, "w") as fh:
        fh.write("scan,status,seconds,error\n")
        for e in entries:
            err = e.error.replace(",", ";").replace("\n", " ")
            fh.write(f"{e.scan},{e.status},{e.seconds:.3f},{err}\n")
    return entries


def run_evaluate(pred_paths: dict[str, Path], truth_path, out_dir,
                 label_names: dict[int, str] | None = None,
                 transform_path=None,
                 deltas=(0.0, 0.01, 0.02, 0.03, 0.04, 0.05)) -> dict:
    """Per-label reports for one or more prediction sets against one truth.

    With several predictions, also writes the best-within-delta winner table.
    """
    from .metrics import best_within_delta, compare_labels
    from .registration import load_transform

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = load_nifti(truth_path, as_labels=True)

    reports = {}
    for name, path in pred_paths.items():
        pred = load_nifti(path, as_labels=True)
        if transform_path is not None:
            t = load_transform(transform_path)
            pred = resample(pred, t, truth.grid(), "nearest")
        report = compare_labels(pred, truth, label_names)
        report.write_csv(out / f"metrics_{name}.csv")
        report.write_json(out / f"summary_{name}.json")
        reports[name] = report

    if len(reports) > 1:
        names = sorted(reports)
        all_labels = sorted({r.label for rep in reports.values()
                             for r in rep.present()})
        matrix = np.full((len(names), len(all_labels)), np.nan)
        for i, name in enumerate(names):
            by_label = {r.label: r.dsc for r in reports[name].present()}
            for j, label in enumerate(all_labels):
                matrix[i, j] = by_label.get(label, np.nan)
        keep = ~np.isnan(matrix).any(axis=0)
        counts = best_within_delta(matrix[:, keep], deltas)
        with open(out / "best_within_delta.csv", "w") as fh:
            fh.write("method," + ",".join(f"delta={d:g}" for d in deltas) + "\n")
            for i, name in enumerate(names):
                fh.write(name + "," + ",".join(str(c) for c in counts[i]) + "\n")
    return reports
