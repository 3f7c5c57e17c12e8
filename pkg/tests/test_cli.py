import json

import pytest

from tilefuse import PhantomSpec, dsc, load_nifti, make_phantom, store_nifti
from tilefuse.cli import main

DIMS = (32, 30, 28)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    vol, lab = make_phantom(PhantomSpec(dims=DIMS, label_count=3, seed=4,
                                        noise_std=0.02))
    store_nifti(vol, root / "atlas_intensity.nii")
    store_nifti(lab, root / "atlas_labels.nii")
    store_nifti(vol, root / "scan.nii")
    code = main([
        "fit",
        "--template", str(root / "atlas_intensity.nii"),
        "--atlas", str(root / "atlas_intensity.nii"), str(root / "atlas_labels.nii"),
        "--atlas", str(root / "atlas_intensity.nii"), str(root / "atlas_labels.nii"),
        "--output-dir", str(root / "model"),
    ])
    assert code == 0
    return root


def test_phantom_subcommand(tmp_path):
    code = main(["phantom", "--dims", "16,14,12", "--labels", "3", "--seed", "9",
                 "--output-dir", str(tmp_path)])
    assert code == 0
    vol = load_nifti(tmp_path / "phantom_intensity.nii")
    lab = load_nifti(tmp_path / "phantom_labels.nii")
    assert vol.dims == (16, 14, 12)
    assert lab.label_count == 3


def test_phantom_deterministic_across_runs(tmp_path):
    for sub in ("a", "b"):
        code = main(["phantom", "--dims", "12,12,12", "--seed", "7",
                     "--output-dir", str(tmp_path / sub)])
        assert code == 0
    assert (tmp_path / "a" / "phantom_intensity.nii").read_bytes() == \
        (tmp_path / "b" / "phantom_intensity.nii").read_bytes()


def test_segment_cli_end_to_end(workspace, tmp_path, capsys):
    code = main([
        "segment",
        "--input", str(workspace / "scan.nii"),
        "--model-dir", str(workspace / "model"),
        "--lattice", "slant8",
        "--segmenter", "prior",
        "--jobs", "2",
        "--output-dir", str(tmp_path / "out"),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "labels:" in out
    labels = load_nifti(tmp_path / "out" / "labels_native.nii")
    truth = load_nifti(workspace / "atlas_labels.nii")
    assert dsc(labels.data > 0, truth.data > 0) > 0.97


def test_segment_requires_model_dir(tmp_path, capsys):
    code = main(["segment", "--input", str(tmp_path / "missing.nii"),
                 "--output-dir", str(tmp_path / "o")])
    assert code == 2
    assert "configuration error" in capsys.readouterr().err


def test_segment_missing_model_is_exit_2(workspace, tmp_path, capsys):
    code = main(["segment", "--input", str(workspace / "scan.nii"),
                 "--model-dir", str(tmp_path / "nope"),
                 "--output-dir", str(tmp_path / "o")])
    assert code == 2


def test_bad_flag_is_exit_2(capsys):
    assert main(["segment", "--lattice", "slant99"]) == 2


def test_config_file_with_flag_override(workspace, tmp_path):
    config = {
        "model_dir": str(workspace / "model"),
        "lattice": "slant8",
        "segmenter": "prior",
        "output_dir": str(tmp_path / "from_config"),
        "registration": {"dof": 9, "levels": 3, "max_iters": 60},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    code = main([
        "segment",
        "--input", str(workspace / "scan.nii"),
        "--config", str(cfg_path),
        "--output-dir", str(tmp_path / "overridden"),  # flag wins
    ])
    assert code == 0
    assert (tmp_path / "overridden" / "labels_native.nii").is_file()
    assert not (tmp_path / "from_config").exists()
    effective = json.loads(
        (tmp_path / "overridden" / "effective_config.json").read_text())
    assert effective["output_dir"] == str(tmp_path / "overridden")
    assert effective["registration"]["dof"] == 9


def test_batch_cli_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.nii"
    bad.write_bytes(b"junk")
    code = main([
        "batch", str(workspace / "scan.nii"), str(bad),
        "--model-dir", str(workspace / "model"),
        "--lattice", "slant8",
        "--output-dir", str(tmp_path / "batch"),
    ])
    assert code == 1
    out = capsys.readouterr().out
    assert "1/2 scans succeeded" in out
    assert (tmp_path / "batch" / "batch_summary.csv").is_file()


def test_evaluate_cli(workspace, tmp_path, capsys):
    code = main([
        "evaluate",
        "--pred", f"self={workspace / 'atlas_labels.nii'}",
        "--truth", str(workspace / "atlas_labels.nii"),
        "--output-dir", str(tmp_path / "eval"),
    ])
    assert code == 0
    assert "mean DSC 1.0000" in capsys.readouterr().out


def test_label_names_reach_csv(workspace, tmp_path):
    names = tmp_path / "names.csv"
    names.write_text("1,outer shell\n2,core\n")
    code = main([
        "evaluate",
        "--pred", f"self={workspace / 'atlas_labels.nii'}",
        "--truth", str(workspace / "atlas_labels.nii"),
        "--label-names", str(names),
        "--output-dir", str(tmp_path / "eval"),
    ])
    assert code == 0
    csv_text = (tmp_path / "eval" / "metrics_self.csv").read_text()
    assert "outer shell" in csv_text


def test_log_env_var_sets_level(monkeypatch):
    import logging

    monkeypatch.setenv("TILEFUSE_LOG", "DEBUG")
    from tilefuse.cli import _setup_logging

    root_level = logging.getLogger().level
    try:
        _setup_logging()
        # basicConfig only applies once per process; accept either a fresh
        # DEBUG level or an already-configured root
        assert logging.getLogger().level in (logging.DEBUG, root_level)
    finally:
        logging.getLogger().setLevel(root_level)
