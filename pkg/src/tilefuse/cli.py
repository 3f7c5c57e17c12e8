"""Command-line interface.

Subcommands: fit, segment, batch, phantom, evaluate. Configuration comes
from an optional JSON file plus flags; explicitly passed flags win. Exit
codes: 0 success, 1 at least one scan failed in batch, 2 configuration
error, 3 internal/runtime error. TILEFUSE_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, TilefuseError
from .model_store import fit_model_dir
from .nifti import load_nifti, store_nifti
from .phantom import PhantomSpec, make_phantom
from .pipeline import (
    PipelineConfig,
    config_from_json,
    run_batch,
    run_evaluate,
    run_segment,
)


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def _triple_f(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    return tuple(float(p) for p in parts)


def _add_segment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--model-dir")
    p.add_argument("--lattice", choices=["slant8", "slant27", "custom"])
    p.add_argument("--tile-size", type=_triple, metavar="X,Y,Z")
    p.add_argument("--tile-counts", type=_triple, metavar="X,Y,Z")
    p.add_argument("--segmenter", choices=["prior", "knn", "external"])
    p.add_argument("--plugin-cmd")
    p.add_argument("--plugin-timeout", type=float)
    p.add_argument("--labels", type=int, dest="label_count")
    p.add_argument("--jobs", type=int)
    p.add_argument("--pre-hook", dest="pre_hook")
    p.add_argument("--output-dir")
    p.add_argument("--keep-intermediates", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--knn-patch-mm", type=float,
                   help="patch window in mm (default 3)")
    p.add_argument("--knn-search-mm", type=float,
                   help="search window in mm (default 5)")
    p.add_argument("--select-atlases", type=int,
                   help="atlases picked by PCA selection (default 15)")


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        config = config_from_json(doc)
    else:
        config = PipelineConfig()
    overrides = {
        "model_dir": args.model_dir,
        "lattice": args.lattice,
        "tile_size": args.tile_size,
        "tile_counts": args.tile_counts,
        "segmenter": args.segmenter,
        "plugin_cmd": args.plugin_cmd,
        "plugin_timeout": args.plugin_timeout,
        "label_count": args.label_count,
        "jobs": args.jobs,
        "pre_hook": args.pre_hook,
        "output_dir": args.output_dir,
        "keep_intermediates": args.keep_intermediates,
        "select_atlases": args.select_atlases,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    if not config.model_dir:
        raise ConfigurationError("--model-dir is required")
    return config


def _apply_knn_mm(config: PipelineConfig, args) -> None:
    if args.knn_patch_mm is None and args.knn_search_mm is None:
        return
    from .segmenter import mm_to_odd_voxels

    model_template = Path(config.model_dir) / "template.nii"
    spacing = (1.0, 1.0, 1.0)
    if model_template.is_file():
        spacing = load_nifti(model_template).spacing
    if args.knn_patch_mm is not None:
        config.knn_patch_edge = mm_to_odd_voxels(args.knn_patch_mm, spacing)
    if args.knn_search_mm is not None:
        config.knn_search_edge = mm_to_odd_voxels(args.knn_search_mm, spacing)
    config.knn_search_edge = max(config.knn_search_edge, config.knn_patch_edge)


def _cmd_fit(args) -> int:
    template = load_nifti(args.template)
    atlases = []
    for intensity_path, labels_path in args.atlas:
        name = Path(intensity_path).name.split(".")[0]
        vol = load_nifti(intensity_path)
        lab = load_nifti(labels_path, as_labels=True,
                         label_count=args.label_count)
        atlases.append((name, vol, lab))
    fit_model_dir(template, atlases, args.output_dir,
                  label_count=args.label_count)
    print(f"model written to {args.output_dir}")
    return 0


def _cmd_segment(args) -> int:
    config = _build_config(args)
    _apply_knn_mm(config, args)
    result = run_segment(args.input, config)
    print(f"labels: {result.output_dir / 'labels_native.nii'}")
    print(f"report: {result.output_dir / 'report' / 'summary.txt'}")
    print(f"registration similarity: {result.similarity:.4f}")
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def _cmd_batch(args) -> int:
    config = _build_config(args)
    _apply_knn_mm(config, args)
    scans = list(args.inputs)
    entries = run_batch(scans, config)
    width = max(len(e.scan) for e in entries)
    for e in entries:
        print(f"{e.scan:<{width}}  {e.status:<7}  {e.seconds:8.2f}s  {e.error}")
    failed = sum(1 for e in entries if e.status != "ok")
    print(f"{len(entries) - failed}/{len(entries)} scans succeeded")
    return 1 if failed else 0


def _cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=args.dims, label_count=args.label_count, seed=args.seed,
        noise_std=args.noise, bias_amplitude=args.bias,
        translation=args.translate, rotation=args.rotate, scale=args.scale,
    )
    vol, lab = make_phantom(spec)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = args.prefix
    store_nifti(vol, out / f"{prefix}_intensity.nii")
    store_nifti(lab, out / f"{prefix}_labels.nii")
    print(f"phantom written to {out}/{prefix}_intensity.nii and "
          f"{out}/{prefix}_labels.nii")
    return 0


def _cmd_evaluate(args) -> int:
    preds = {}
    for item in args.pred:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).name.split(".")[0], item
        preds[name] = Path(path)
    label_names = None
    if args.label_names:
        label_names = {}
        for line in Path(args.label_names).read_text().splitlines():
            if not line.strip():
                continue
            label_id, name = line.split(",", 1)
            label_names[int(label_id)] = name.strip()
    reports = run_evaluate(preds, args.truth, args.output_dir,
                           label_names=label_names,
                           transform_path=args.transform,
                           deltas=args.deltas)
    for name, report in sorted(reports.items()):
        summary = report.summary()
        d = summary["dsc"]
        if d["mean"] is None:
            print(f"{name}: no overlapping labels")
        else:
            print(f"{name}: mean DSC {d['mean']:.4f}, median {d['median']:.4f} "
                  f"over {summary['n_labels']} labels")
    print(f"reports written to {args.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilefuse",
        description="Tiled canonical-space segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="build a model directory from atlases")
    p.add_argument("--template", required=True)
    p.add_argument("--atlas", nargs=2, action="append", required=True,
                   metavar=("INTENSITY", "LABELS"))
    p.add_argument("--labels", type=int, dest="label_count")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("segment", help="segment one scan")
    p.add_argument("--input", required=True)
    _add_segment_flags(p)
    p.set_defaults(fn=_cmd_segment)

    p = sub.add_parser("batch", help="segment many scans, tolerating failures")
    p.add_argument("inputs", nargs="+", metavar="SCAN")
    _add_segment_flags(p)
    p.set_defaults(fn=_cmd_batch)

    p = sub.add_parser("phantom", help="generate a synthetic phantom pair")
    p.add_argument("--dims", type=_triple, default=(64, 64, 64))
    p.add_argument("--labels", type=int, dest="label_count", default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--translate", type=_triple_f, default=(0.0, 0.0, 0.0),
                   metavar="MM,MM,MM")
    p.add_argument("--rotate", type=_triple_f, default=(0.0, 0.0, 0.0),
                   metavar="RAD,RAD,RAD")
    p.add_argument("--scale", type=_triple_f, default=(0.0, 0.0, 0.0),
                   metavar="FX,FY,FZ")
    p.add_argument("--prefix", default="phantom")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("evaluate", help="compare predictions against truth")
    p.add_argument("--pred", action="append", required=True,
                   metavar="[NAME=]PATH")
    p.add_argument("--truth", required=True)
    p.add_argument("--transform", help="native->canonical transform file "
                                       "applied to predictions")
    p.add_argument("--label-names", help="CSV of id,name rows")
    p.add_argument("--deltas", type=float, nargs="+",
                   default=(0.0, 0.01, 0.02, 0.03, 0.04, 0.05))
    p.add_argument("--output-dir", required=True)
    p.set_defaults(fn=_cmd_evaluate)
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("TILEFUSE_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except TilefuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
