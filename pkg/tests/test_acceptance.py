"""Acceptance suite: one test per release criterion, strictest tolerances.

Run with `pytest tests/test_acceptance.py -s` to see one PASS line per
criterion. Criteria with runtime caps assert wall time too.
"""

import itertools
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tilefuse import (
    AffineTransform,
    LabelVolume,
    PhantomSpec,
    PipelineConfig,
    RegistrationConfig,
    Volume,
    build_manifold,
    coverage_map,
    dsc,
    estimate_affine,
    fuse,
    invert,
    load_nifti,
    make_lattice,
    make_phantom,
    preset_lattice,
    resample,
    select,
    store_nifti,
    surface_distance,
    wilcoxon_signed_rank,
)
from tilefuse.harmonize import HarmonizationModel, fit as harm_fit
from tilefuse.metrics import surface_points
from tilefuse.model_store import fit_model_dir
from tilefuse.pipeline import run_segment
from tilefuse.registration import params_to_transform
from tilefuse.segmenter import TileTask

MNI = (172, 220, 156)


def report(name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {name}: PASS{suffix}")


# --- tiling geometry -------------------------------------------------------

def test_tiling_geometry():
    start = time.perf_counter()

    lat27 = preset_lattice("slant27", MNI)
    assert lat27.k == 27
    assert all(t.size == (96, 128, 88) for t in lat27.tiles)
    cov27 = coverage_map(lat27)
    brute = np.zeros(MNI, dtype=np.int32)
    for t in lat27.tiles:
        brute[t.slices()] += 1
    assert np.array_equal(cov27.data, brute)
    assert int(cov27.data.min()) == 1
    assert int(cov27.data.max()) == 27

    lat8 = preset_lattice("slant8", MNI)
    assert lat8.k == 8
    assert all(t.size == (86, 110, 78) for t in lat8.tiles)
    cov8 = coverage_map(lat8)
    assert np.array_equal(np.unique(cov8.data), [1])

    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    report("tiling geometry", f"{elapsed:.2f}s")


# --- fusion oracle equivalence --------------------------------------------

def _random_fusion_instance(rng):
    dims = tuple(int(d) for d in rng.integers(4, 13, 3))
    counts = tuple(int(c) for c in rng.integers(1, 4, 3))
    size = tuple(int(rng.integers(-(-d // c), d + 1))
                 for d, c in zip(dims, counts))
    label_count = int(rng.integers(2, 11))
    lat = make_lattice(dims, counts, size)
    segs = []
    for t in lat.tiles:
        shift = np.eye(4)
        shift[:3, 3] = t.corner
        data = rng.integers(0, label_count, size=t.size).astype(np.int32)
        segs.append((t, LabelVolume(data, (1.0, 1.0, 1.0),
                                    AffineTransform(shift), label_count)))
    return lat, segs, label_count


def _oracle_fuse(lat, segs, label_count):
    out = np.zeros(lat.canonical_dims, dtype=np.int32)
    cover = [[] for _ in range(int(np.prod(lat.canonical_dims)))]
    nx, ny, nz = lat.canonical_dims
    for sub, seg in segs:
        cx, cy, cz = sub.corner
        sx, sy, sz = sub.size
        for x in range(cx, cx + sx):
            for y in range(cy, cy + sy):
                for z in range(cz, cz + sz):
                    cover[(x * ny + y) * nz + z].append(
                        int(seg.data[x - cx, y - cy, z - cz]))
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                votes = cover[(x * ny + y) * nz + z]
                if votes:
                    counts = {}
                    for v in votes:
                        counts[v] = counts.get(v, 0) + 1
                    best = max(counts.values())
                    out[x, y, z] = min(l for l, c in counts.items()
                                       if c == best)
    return out


def test_fusion_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(20260809)
    for _ in range(500):
        lat, segs, label_count = _random_fusion_instance(rng)
        fused = fuse(segs, lat, label_count)
        assert np.array_equal(fused.data, _oracle_fuse(lat, segs, label_count))

    lat, segs, label_count = _random_fusion_instance(rng)
    base = fuse(segs, lat, label_count)
    for _ in range(100):
        perm = rng.permutation(len(segs))
        shuffled = [segs[i] for i in perm]
        out = fuse(shuffled, lat, label_count)
        assert np.array_equal(out.data, base.data)
    report("fusion oracle equivalence",
           f"500 instances + 100 shuffles, {time.perf_counter() - start:.1f}s")


# --- fusion error correction ------------------------------------------------

def test_fusion_error_correction():
    _, truth_vol = make_phantom(PhantomSpec(dims=(12, 8, 8), label_count=3,
                                            seed=6, noise_std=0.0))
    truth = truth_vol.data
    lat = make_lattice((12, 8, 8), (3, 1, 1), (8, 8, 8))
    label_count = 4  # leave room for a corruption label
    segs = []
    for t in lat.tiles:
        shift = np.eye(4)
        shift[:3, 3] = t.corner
        segs.append((t, LabelVolume(truth[t.slices()].astype(np.int32),
                                    (1.0, 1.0, 1.0), AffineTransform(shift),
                                    label_count)))
    sub, _ = segs[1]
    corrupted = np.full(sub.size, 3, dtype=np.int32)
    shift = np.eye(4)
    shift[:3, 3] = sub.corner
    segs[1] = (sub, LabelVolume(corrupted, (1.0, 1.0, 1.0),
                                AffineTransform(shift), label_count))

    fused = fuse(segs, lat, label_count)
    truth_votes = np.zeros((12, 8, 8), dtype=np.int32)
    for s, seg in segs:
        truth_votes[s.slices()] += seg.data == truth[s.slices()]
    agree = truth_votes >= 2
    assert agree.any()
    violations = int((fused.data[agree] != truth[agree]).sum())
    assert violations == 0
    report("fusion error correction", "zero violations")


# --- metrics oracles ---------------------------------------------------------

def test_metrics_oracles():
    rng = np.random.default_rng(42)

    # DSC against direct substitution
    for _ in range(50):
        a = rng.integers(0, 2, (6, 6, 6)).astype(bool)
        m = rng.integers(0, 2, (6, 6, 6)).astype(bool)
        total = a.sum() + m.sum()
        expected = 1.0 if total == 0 else 2.0 * (a & m).sum() / total
        assert abs(dsc(a, m) - expected) <= 1e-12

    # surface distances against the all-pairs oracle, float-exact
    checked = 0
    while checked < 30:
        a = rng.integers(0, 2, (5, 5, 5)).astype(bool)
        m = rng.integers(0, 2, (5, 5, 5)).astype(bool)
        if not a.any() or not m.any():
            continue
        spacing = tuple(rng.choice([0.5, 1.0, 2.0], 3))
        pa = surface_points(a) * np.asarray(spacing)
        pm = surface_points(m) * np.asarray(spacing)
        assert len(pa) <= 200 and len(pm) <= 200
        d = np.linalg.norm(pa[:, None, :] - pm[None, :, :], axis=2)
        expected = (d.min(axis=1).mean(),
                    0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()),
                    max(d.min(axis=1).max(), d.min(axis=0).max()))
        got = surface_distance(a, m, spacing=spacing)
        assert got[0] == expected[0]
        assert got[1] == expected[1]
        assert got[2] == expected[2]
        checked += 1

    # Wilcoxon exact equals full 2^n enumeration
    for trial in range(15):
        n = int(rng.integers(5, 13))
        x = rng.integers(-3, 6, n).astype(float)
        y = rng.integers(-3, 6, n).astype(float)
        diff = x - y
        nz = diff[diff != 0]
        if nz.size == 0:
            continue
        result = wilcoxon_signed_rank(x, y)
        order = np.argsort(np.abs(nz), kind="stable")
        ranks = np.empty(nz.size)
        srt = np.abs(nz)[order]
        i = 0
        while i < nz.size:
            j = i
            while j + 1 < nz.size and srt[j + 1] == srt[i]:
                j += 1
            ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        w_obs = ranks[nz > 0].sum()
        ws = np.array([
            sum(r for r, s in zip(ranks, signs) if s)
            for signs in itertools.product([0, 1], repeat=nz.size)
        ])
        expected_p = min(1.0, 2.0 * min((ws <= w_obs + 1e-12).mean(),
                                        (ws >= w_obs - 1e-12).mean()))
        assert result.exact
        assert abs(result.p_value - expected_p) <= 1e-12
    report("metrics oracles")


# --- harmonization ----------------------------------------------------------

def _model_from_vector(vec):
    from tilefuse import BrainMask

    mask = BrainMask(np.ones((vec.size, 1, 1), dtype=bool), (1.0, 1.0, 1.0),
                     AffineTransform.identity())
    return HarmonizationModel(mask, vec)


def test_harmonization_fit_criteria():
    vec = np.linspace(6.0, -6.0, 200)
    model = _model_from_vector(vec)

    ident = harm_fit(model, vec.copy())
    assert abs(ident.beta0) < 1e-6 and abs(ident.beta1 - 1.0) < 1e-6

    distorted = harm_fit(model, (vec - 5.0) / 2.0)
    assert abs(distorted.beta1 - 2.0) < 1e-6
    assert abs(distorted.beta0 - 5.0) < 1e-6

    rng = np.random.default_rng(0)
    n = 500
    y = np.linspace(20.0, -20.0, n)
    x = (y - 5.0) / 2.0 + rng.normal(0.0, 1e-6, n)
    idx = rng.choice(n, n // 10, replace=False)
    x_corrupt = x.copy()
    x_corrupt[idx] += rng.choice([-15.0, 15.0], idx.size)
    clean = np.setdiff1d(np.arange(n), idx)
    design = np.column_stack([np.ones(clean.size), x[clean]])
    ols = np.linalg.lstsq(design, y[clean], rcond=None)[0]
    robust = harm_fit(_model_from_vector(y), x_corrupt)
    assert abs(robust.beta0 - ols[0]) < 1e-3
    assert abs(robust.beta1 - ols[1]) < 1e-3
    report("harmonization fits", "identity, linear, 10% outliers")


# --- registration recovery ---------------------------------------------------

def test_registration_recovery():
    start = time.perf_counter()
    vol, _ = make_phantom(PhantomSpec(dims=(48, 40, 32), label_count=4, seed=3,
                                      noise_std=0.02, bias_amplitude=0.2))
    rng = np.random.default_rng(1)
    center = (np.array(vol.dims) - 1.0) / 2.0
    corners = np.array([[x, y, z] for x in (0, 47) for y in (0, 39)
                        for z in (0, 31)], dtype=float).T
    config = RegistrationConfig(dof=9)
    failures = 0
    errors = []
    for _ in range(20):
        u = np.zeros(12)
        u[0:3] = rng.uniform(-1.0, 1.0, 3)       # translations <= 10 mm
        u[3:6] = rng.uniform(-1.745, 1.745, 3)   # rotations <= 10 deg
        u[6:9] = rng.uniform(-1.0, 1.0, 3)       # scales in [0.9, 1.1]
        t_true = params_to_transform(u, np.zeros(3), center, dof=12)
        moving = resample(vol, invert(t_true), vol.grid(), "trilinear")
        t_rec, _ = estimate_affine(moving, vol, config)
        err = np.linalg.norm(
            t_rec.apply_points(corners) - t_true.apply_points(corners), axis=0
        ).mean()
        errors.append(err)
        if err >= 2.0:
            failures += 1
    elapsed = time.perf_counter() - start
    assert failures <= 2, f"{failures} failures, errors {np.round(errors, 2)}"
    assert elapsed < 120.0
    report("registration recovery",
           f"{20 - failures}/20 within 2 mm, {elapsed:.0f}s")


# --- end-to-end phantom round trip -------------------------------------------

@pytest.fixture(scope="module")
def e2e_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_e2e")
    vol, lab = make_phantom(PhantomSpec(dims=(96, 96, 96), label_count=5,
                                        seed=21, noise_std=0.02,
                                        bias_amplitude=0.1))
    store_nifti(vol, root / "scan.nii")
    store_nifti(lab, root / "truth.nii")
    fit_model_dir(vol, [("self0", vol, lab), ("self1", vol, lab)],
                  root / "model")
    return root


def test_end_to_end_phantom_roundtrip(e2e_workspace):
    start = time.perf_counter()
    config = PipelineConfig(
        model_dir=str(e2e_workspace / "model"),
        output_dir=str(e2e_workspace / "out"),
        lattice="slant27",
        segmenter="prior",
        registration=RegistrationConfig(dof=9),
    )
    result = run_segment(e2e_workspace / "scan.nii", config)
    elapsed = time.perf_counter() - start

    truth = load_nifti(e2e_workspace / "truth.nii")
    scores = []
    for label in range(1, 5):
        score = dsc(result.labels_native.data == label, truth.data == label)
        scores.append(score)
        assert score >= 0.99, f"label {label}: DSC {score:.4f}"
    assert result.segmenter_invocations == 27
    assert result.labels_native.dims == truth.dims
    assert elapsed < 60.0
    report("end-to-end phantom round trip",
           f"min DSC {min(scores):.4f}, {elapsed:.0f}s")


# --- determinism across parallelism ------------------------------------------

def test_determinism_across_jobs(e2e_workspace):
    outputs = []
    for jobs in (1, 8):
        config = PipelineConfig(
            model_dir=str(e2e_workspace / "model"),
            output_dir=str(e2e_workspace / f"det_j{jobs}"),
            lattice="slant8",
            segmenter="prior",
            jobs=jobs,
            registration=RegistrationConfig(dof=9),
        )
        result = run_segment(e2e_workspace / "scan.nii", config)
        outputs.append((result.output_dir / "labels_native.nii").read_bytes())
    assert outputs[0] == outputs[1]
    report("determinism across --jobs", "bit-identical label files")


# --- PCA selection ------------------------------------------------------------

def test_pca_selection():
    from tilefuse import BrainMask
    from tilefuse.harmonize import znormalize

    rng = np.random.default_rng(8)
    dims = (8, 8, 8)
    mask = BrainMask(np.ones(dims, dtype=bool), (1.0, 1.0, 1.0),
                     AffineTransform.identity())
    atlases = [(f"a{i}", Volume(rng.standard_normal(dims), (1, 1, 1)))
               for i in range(10)]
    manifold = build_manifold(atlases, mask)

    vectors = np.stack([znormalize(v).data[mask.data] for _, v in atlases])
    centered = vectors - vectors.mean(axis=0)
    for i in range(10):
        for j in range(i + 1, 10):
            orig = np.linalg.norm(centered[i] - centered[j])
            proj = np.linalg.norm(manifold.atlas_projections[i]
                                  - manifold.atlas_projections[j])
            assert abs(orig - proj) <= 1e-6 * orig

    for name, vol in atlases:
        assert select(manifold, vol, n=1) == [name]
    report("PCA selection", "distances exact, self-selection 10/10")


# --- plugin protocol round trip (secondary) -----------------------------------

def _plugin_command() -> str:
    import importlib.util

    if importlib.util.find_spec("tilefuse_ref_plugin") is None:
        src = Path(__file__).resolve().parents[1] / "plugin" / "src"
        existing = os.environ.get("PYTHONPATH", "")
        os.environ["PYTHONPATH"] = f"{src}{os.pathsep}{existing}" if existing \
            else str(src)
    return f"{sys.executable} -m tilefuse_ref_plugin"


def _inprocess_quantile_backend(task: TileTask) -> LabelVolume:
    # mirror the plugin exactly: the file protocol stores tiles as float32,
    # so quantiles are computed on the float32-rounded values
    data = task.intensity.data.astype(np.float32)
    qs = np.arange(1, task.label_count) / task.label_count
    thresholds = np.quantile(data, qs, method="linear")
    labels = np.searchsorted(thresholds, data, side="right").astype(np.int32)
    return LabelVolume(labels, task.intensity.spacing,
                       task.intensity.voxel_to_world, task.label_count)


def test_plugin_protocol_roundtrip(e2e_workspace):
    command = _plugin_command()
    base = dict(
        model_dir=str(e2e_workspace / "model"),
        lattice="slant8",
        registration=RegistrationConfig(dof=9),
    )
    external = PipelineConfig(
        output_dir=str(e2e_workspace / "ext"), segmenter="external",
        plugin_cmd=command, **base)
    r_ext = run_segment(e2e_workspace / "scan.nii", external)

    inproc = PipelineConfig(
        output_dir=str(e2e_workspace / "inproc"), segmenter="prior", **base)
    r_in = run_segment(e2e_workspace / "scan.nii", inproc,
                       backend_override=_inprocess_quantile_backend)

    for rel in ("labels_native.nii", "intermediates/fused_canonical.nii"):
        ext_bytes = (r_ext.output_dir / rel).read_bytes()
        in_bytes = (r_in.output_dir / rel).read_bytes()
        assert ext_bytes == in_bytes, f"{rel} differs"
    report("plugin protocol round trip", "bit-identical through the manifest")


def test_plugin_failure_surfaces_context(e2e_workspace, tmp_path, capsys):
    from tilefuse.cli import main

    script = tmp_path / "fail.py"
    script.write_text("import sys; sys.stderr.write('dead'); sys.exit(5)")
    code = main([
        "segment",
        "--input", str(e2e_workspace / "scan.nii"),
        "--model-dir", str(e2e_workspace / "model"),
        "--lattice", "slant8",
        "--segmenter", "external",
        "--plugin-cmd", f"{sys.executable} {script}",
        "--output-dir", str(tmp_path / "out"),
    ])
    err = capsys.readouterr().err
    assert code == 3
    assert "tile 1" in err
    assert "exit code 5" in err
    report("plugin failure context", "tile index and exit code surfaced")
