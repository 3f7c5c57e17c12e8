"""Plain-text run summary plus mid-plane slice images for quick QA.

Slice images are binary PGM (P5): grayscale intensity with segmentation
boundaries burned in at maximum intensity, one image per anatomical plane.
PGM needs no imaging dependency and every viewer opens it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

PLANES = ("axial", "coronal", "sagittal")


@dataclass
class RunInfo:
    """Everything emit_report needs to describe a finished segmentation."""

    scan_id: str
    lattice_desc: str
    segmenter_desc: str
    stage_seconds: list[tuple[str, float]] = field(default_factory=list)
    total_seconds: float = 0.0
    warnings: list[str] = field(default_factory=list)
    similarity: float | None = None


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; image is (rows, cols) uint8."""
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def _to_gray(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(slice2d, [1.0, 99.0])
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    scaled = np.clip((slice2d - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def _boundaries(labels2d: np.ndarray) -> np.ndarray:
    edge = np.zeros(labels2d.shape, dtype=bool)
    edge[:-1, :] |= labels2d[:-1, :] != labels2d[1:, :]
    edge[1:, :] |= labels2d[1:, :] != labels2d[:-1, :]
    edge[:, :-1] |= labels2d[:, :-1] != labels2d[:, 1:]
    edge[:, 1:] |= labels2d[:, 1:] != labels2d[:, :-1]
    return edge & (labels2d > 0) | _outer_edge(labels2d)


def _outer_edge(labels2d: np.ndarray) -> np.ndarray:
    # background-adjacent foreground already handled; this catches
    # foreground touching the image border
    edge = np.zeros(labels2d.shape, dtype=bool)
    edge[0, :] = labels2d[0, :] > 0
    edge[-1, :] = labels2d[-1, :] > 0
    edge[:, 0] = labels2d[:, 0] > 0
    edge[:, -1] = labels2d[:, -1] > 0
    return edge


def _mid_slices(data: np.ndarray):
    x, y, z = (d // 2 for d in data.shape)
    return {
        "axial": data[:, :, z],
        "coronal": data[:, y, :],
        "sagittal": data[x, :, :],
    }


def emit_report(segmentation: LabelVolume, intensity: Volume, info: RunInfo,
                out_dir, metrics_summary: dict | None = None) -> Path:
    """Write summary.txt and three slice PGMs into out_dir/report."""
    report_dir = Path(out_dir) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    gray_slices = _mid_slices(intensity.data)
    label_slices = _mid_slices(segmentation.data)
    for plane in PLANES:
        img = _to_gray(gray_slices[plane])
        img = img.copy()
        img[_boundaries(label_slices[plane])] = 255
        try:
            write_pgm(report_dir / f"{plane}.pgm", img)
        except OSError as exc:
            log.warning("could not write %s slice image: %s", plane, exc)
            info.warnings.append(f"slice image {plane} failed: {exc}")

    labels, counts = np.unique(segmentation.data, return_counts=True)
    lines = [
        "segmentation run report",
        "=======================",
        f"scan:       {info.scan_id}",
        f"lattice:    {info.lattice_desc}",
        f"segmenter:  {info.segmenter_desc}",
    ]
    if info.similarity is not None:
        lines.append(f"registration NCC: {info.similarity:.4f}")
    lines.append("")
    lines.append("stage wall times (s):")
    for stage, seconds in info.stage_seconds:
        lines.append(f"  {stage:<24s} {seconds:8.3f}")
    lines.append(f"  {'total':<24s} {info.total_seconds:8.3f}")
    lines.append("")
    lines.append("label voxel counts:")
    for label, count in zip(labels.tolist(), counts.tolist()):
        lines.append(f"  label {label:>4d}: {count}")
    if metrics_summary:
        lines.append("")
        lines.append("metrics summary:")
        for key, stats in sorted(metrics_summary.items()):
            if isinstance(stats, dict) and stats.get("mean") is not None:
                lines.append(f"  {key}: mean={stats['mean']:.4f} "
                             f"median={stats['median']:.4f} std={stats['std']:.4f}")
    lines.append("")
    if info.warnings:
        lines.append("warnings:")
        for w in info.warnings:
            lines.append(f"  - {w}")
    else:
        lines.append("warnings: none")
    lines.append("")
    (report_dir / "summary.txt").write_text("\n".join(lines))
    return report_dir
