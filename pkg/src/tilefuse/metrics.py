"""Segmentation evaluation: overlap, surface distances, rank tests, summaries.

Surfaces are the 6-connectivity boundary voxels of a binary mask, taken at
voxel centers in world mm; distances between surfaces are nearest-neighbor
Euclidean queries, so they agree exactly with an all-pairs brute-force
computation. The signed-rank test enumerates the exact null distribution for
small samples and falls back to the tie-corrected normal approximation with
continuity correction above 25 nonzero pairs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, UndefinedDistanceError

log = logging.getLogger(__name__)

WILCOXON_EXACT_MAX = 25


def dsc(a: np.ndarray, m: np.ndarray) -> float:
    """Dice overlap 2|A n M| / (|A| + |M|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if a.shape != m.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {m.shape}")
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & m).sum()) / total


def surface_points(mask: np.ndarray, voxel_to_world=None) -> np.ndarray:
    """World coordinates (n, 3) of voxels with an unset/out-of-bounds face neighbor."""
    mask = np.asarray(mask, dtype=bool)
    boundary = np.zeros_like(mask)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        inner_lo = mask[tuple(lo)] & ~mask[tuple(hi)]
        inner_hi = mask[tuple(hi)] & ~mask[tuple(lo)]
        boundary[tuple(lo)] |= inner_lo
        boundary[tuple(hi)] |= inner_hi
        edge = [slice(None)] * 3
        edge[ax] = 0
        boundary[tuple(edge)] |= mask[tuple(edge)]
        edge[ax] = mask.shape[ax] - 1
        boundary[tuple(edge)] |= mask[tuple(edge)]
    idx = np.argwhere(boundary).astype(np.float64)
    if voxel_to_world is None:
        return idx
    return voxel_to_world.apply_points(idx.T).T


def surface_distance(a: np.ndarray, m: np.ndarray, spacing=None,
                     voxel_to_world=None) -> tuple[float, float, float]:
    """(directed MSD a->m, symmetric MSD, Hausdorff) in mm.

    Pass either `spacing` (axis-aligned grid) or a full `voxel_to_world`.
    """
    a = np.asarray(a, dtype=bool)
    m = np.asarray(m, dtype=bool)
    if a.shape != m.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {m.shape}")
    if not a.any() or not m.any():
        raise UndefinedDistanceError("surface distance needs two nonempty masks")

    if voxel_to_world is not None:
        pa = surface_points(a, voxel_to_world)
        pm = surface_points(m, voxel_to_world)
    else:
        sp = np.ones(3) if spacing is None else np.asarray(spacing, dtype=np.float64)
        pa = surface_points(a) * sp
        pm = surface_points(m) * sp

    d_am = cKDTree(pm).query(pa)[0]
    d_ma = cKDTree(pa).query(pm)[0]
    msd_directed = float(d_am.mean())
    msd_symmetric = 0.5 * (msd_directed + float(d_ma.mean()))
    hausdorff = max(float(d_am.max()), float(d_ma.max()))
    return msd_directed, msd_symmetric, hausdorff


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float      # W+: rank sum of positive differences
    n_nonzero: int
    exact: bool
    degenerate: bool = False


def _exact_signed_rank_p(ranks2: np.ndarray, w2: int) -> float:
    """Two-sided exact p from the distribution of 2*W+ over all sign flips.

    ranks2 holds doubled ranks (integers even with midrank ties); a dense
    DP table over achievable sums enumerates all 2^n assignments.
    """
    total = int(ranks2.sum())
    table = np.zeros(total + 1, dtype=np.float64)
    table[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(table)
        shifted[r:] = table[: total + 1 - r]
        table = table + shifted
    table /= table.sum()
    p_low = float(table[: w2 + 1].sum())
    p_high = float(table[w2:].sum())
    return min(1.0, 2.0 * min(p_low, p_high))


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided paired signed-rank test; zeros dropped, ties midranked."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length 1D sequences")
    if x.size < 5:
        raise ValueError(f"need at least 5 pairs, got {x.size}")
    diff = x - y
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        return WilcoxonResult(1.0, 0.0, 0, True, degenerate=True)

    order = np.argsort(np.abs(diff), kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_abs = np.abs(diff)[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w_plus = float(ranks[diff > 0].sum())

    if n <= WILCOXON_EXACT_MAX:
        ranks2 = np.rint(ranks * 2).astype(np.int64)
        p = _exact_signed_rank_p(ranks2, int(round(w_plus * 2)))
        return WilcoxonResult(p, w_plus, n, True)

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(sorted_abs, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return WilcoxonResult(1.0, w_plus, n, False, degenerate=True)
    z = (abs(w_plus - mu) - 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))
    return WilcoxonResult(p, w_plus, n, False)


def best_within_delta(median_dsc: np.ndarray, deltas) -> np.ndarray:
    """Winner counts per (method, delta): method wins a column when its
    median is within delta of the column max."""
    scores = np.asarray(median_dsc, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("median_dsc must be a nonempty (methods x ROIs) matrix")
    col_max = scores.max(axis=0)
    out = np.zeros((scores.shape[0], len(deltas)), dtype=np.int64)
    for j, delta in enumerate(deltas):
        out[:, j] = (scores >= col_max - float(delta)).sum(axis=1)
    return out


def mds_order(stats: np.ndarray) -> np.ndarray:
    """Row permutation from 1D classical MDS of the row feature vectors.

    Equivalent to sorting by the first principal coordinate of the
    double-centered squared-distance matrix. The coordinate sign is fixed so
    the first row's value is <= the last row's. Degenerate inputs (all rows
    identical) return the input order.
    """
    rows = np.asarray(stats, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need a 2D matrix with >= 2 rows")
    n = rows.shape[0]
    sq = ((rows[:, None, :] - rows[None, :, :]) ** 2).sum(axis=2)
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * j @ sq @ j
    vals, vecs = np.linalg.eigh(b)
    if vals[-1] <= 1e-12:
        log.warning("all rows identical; MDS ordering falls back to input order")
        return np.arange(n)
    coord = vecs[:, -1] * math.sqrt(vals[-1])
    if coord[0] > coord[-1]:
        coord = -coord
    return np.argsort(coord, kind="stable")


@dataclass
class LabelRow:
    label: int
    name: str
    dsc: float | None
    msd: float | None
    msd_sym: float | None
    hausdorff: float | None
    voxels_auto: int
    voxels_manual: int
    missing: bool = False


@dataclass
class LabelReport:
    """Per-label metric rows plus summary statistics across present labels."""

    rows: list[LabelRow] = field(default_factory=list)

    def present(self) -> list[LabelRow]:
        return [r for r in self.rows if not r.missing]

    def summary(self) -> dict:
        present = self.present()
        out = {
            "n_labels": len(present),
            "missing_labels": [r.label for r in self.rows if r.missing],
        }
        for key in ("dsc", "msd", "msd_sym", "hausdorff"):
            values = np.array([getattr(r, key) for r in present], dtype=np.float64)
            if values.size:
                out[key] = {
                    "mean": float(values.mean()),
                    "median": float(np.median(values)),
                    "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
                }
            else:
                out[key] = {"mean": None, "median": None, "std": None}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "name", "dsc", "msd", "msd_sym",
                             "hausdorff", "voxels_auto", "voxels_manual"])
            for r in self.rows:
                fmt = lambda v: "" if v is None else f"{v:.6f}"
                writer.writerow([r.label, r.name, fmt(r.dsc), fmt(r.msd),
                                 fmt(r.msd_sym), fmt(r.hausdorff),
                                 r.voxels_auto, r.voxels_manual])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def compare_labels(pred, truth, label_names: dict[int, str] | None = None,
                   labels=None) -> LabelReport:
    """Per-label report comparing two label volumes on the same grid.

    Labels empty in either volume become missing rows (excluded from the
    summary); background 0 is never evaluated.
    """
    from .volume import require_same_grid

    require_same_grid(pred, truth, "prediction and truth")
    names = label_names or {}
    if labels is None:
        labels = sorted(set(np.unique(pred.data)) | set(np.unique(truth.data)))
        labels = [int(l) for l in labels if l != 0]
    report = LabelReport()
    spacing = truth.spacing
    for label in labels:
        a = pred.data == label
        m = truth.data == label
        na, nm = int(a.sum()), int(m.sum())
        if na == 0 or nm == 0:
            report.rows.append(LabelRow(label, names.get(label, ""), None, None,
                                        None, None, na, nm, missing=True))
            continue
        msd, msd_sym, hd = surface_distance(a, m, spacing=spacing)
        report.rows.append(LabelRow(label, names.get(label, ""), dsc(a, m),
                                    msd, msd_sym, hd, na, nm))
    return report
