#!/usr/bin/env python3
"""Print tile lattice geometry and coverage statistics for a grid.

Defaults to the 1 mm canonical brain grid; pass --dims to inspect others.
"""

import argparse

import numpy as np

from tilefuse import coverage_map, make_lattice, preset_lattice


def describe(lat, name: str) -> None:
    print(f"\n{name}: k={lat.k} tiles of {lat.tile_size} "
          f"on {lat.canonical_dims}")
    for axis, label in enumerate("xyz"):
        corners = sorted({t.corner[axis] for t in lat.tiles})
        print(f"  {label} corners: {corners}")
    cov = coverage_map(lat).data
    values, counts = np.unique(cov, return_counts=True)
    print(f"  coverage min={cov.min()} max={cov.max()}")
    total = cov.size
    for v, c in zip(values.tolist(), counts.tolist()):
        print(f"    coverage {v:>2d}: {c:>9d} voxels ({100.0 * c / total:5.1f}%)")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dims", type=lambda s: tuple(map(int, s.split(","))),
                        default=(172, 220, 156), metavar="X,Y,Z")
    parser.add_argument("--counts", type=lambda s: tuple(map(int, s.split(","))),
                        help="also show a custom lattice with these counts")
    parser.add_argument("--size", type=lambda s: tuple(map(int, s.split(","))),
                        help="tile size for the custom lattice")
    args = parser.parse_args()

    for preset in ("slant8", "slant27"):
        describe(preset_lattice(preset, args.dims), preset)
    if args.counts and args.size:
        describe(make_lattice(args.dims, args.counts, args.size),
                 f"custom {args.counts}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
