"""End-to-end command-line pipeline: synth -> train -> extract -> eval."""

import csv
import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from pyrcnn import read_features
from pyrcnn.cli import main


def write_config(dirpath, **overrides):
    cfg = {
        "seed": 7,
        "output_dir": "out",
        "data": {"dir": "gallery", "n_identities": 6,
                 "images_per_identity": 3, "edge": 36,
                 "holdout_fraction": 1 / 3},
        "pyramid": {"levels": 2},
        "train": {"iterations_per_level": 4, "batch_size": 4,
                  "validation_fraction": 0.25},
        "evaluation": {"n_pairs": 40, "fpr_targets": [0.1]},
    }
    cfg.update(overrides)
    path = Path(dirpath) / "run.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def run_pipeline(dirpath, **overrides):
    """synth + train + extract + eval in one directory; returns key paths."""
    Path(dirpath).mkdir(parents=True, exist_ok=True)
    cfg = write_config(dirpath, **overrides)
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    out = Path(dirpath) / "out"
    model = out / "model.bin"
    eval_index = out / "eval_index.csv"
    assert main(["extract", "--config", str(cfg), str(model),
                 str(eval_index)]) == 0
    features = out / "features.csv"
    assert main(["eval", "--config", str(cfg), str(features),
                 str(eval_index)]) == 0
    return {"config": cfg, "gallery": Path(dirpath) / "gallery", "out": out,
            "model": model, "features": features,
            "report": out / "report.csv"}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


# ---------------------------------------------------------------------------
# happy path


def test_synth_writes_gallery_and_index(pipeline):
    gallery = pipeline["gallery"]
    assert (gallery / "index.csv").is_file()
    assert len(list(gallery.glob("*.pgm"))) == 6 * 3


def test_train_writes_model_splits_and_traces(pipeline):
    out = pipeline["out"]
    assert pipeline["model"].read_bytes()[:8] == b"PYRCNN01"
    for name in ("train_index.csv", "eval_index.csv"):
        assert (out / name).is_file()
    # identity-disjoint split over the 6 synthetic identities
    def labels(name):
        with open(out / name, newline="", encoding="utf-8") as fh:
            return {row[1] for row in list(csv.reader(fh))[1:] if row}
    train_labels, eval_labels = labels("train_index.csv"), \
        labels("eval_index.csv")
    assert len(train_labels) == 4 and len(eval_labels) == 2
    assert not train_labels & eval_labels

    for level in (0, 1):
        with open(out / f"trace_level{level}.csv", newline="",
                  encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "mean_loss", "val_auc"]
        assert len(rows) == 1 + 4  # header + one row per iteration
        losses = [float(r[1]) for r in rows[1:]]
        assert all(np.isfinite(losses))


def test_extract_writes_one_row_per_eval_image(pipeline):
    feats = read_features(pipeline["features"])
    assert len(feats) == 6  # 2 held-out identities x 3 images
    assert all(vec.shape == (8,) for vec in feats.values())


def test_eval_writes_report(pipeline):
    with open(pipeline["report"], newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    named = {row[0]: row[1] for row in rows if len(row) == 2}
    assert 0.0 <= float(named["auc"]) <= 1.0
    assert 0.5 <= float(named["best_accuracy"]) <= 1.0
    assert named["n_matched"] == "20" and named["n_unmatched"] == "20"
    assert "tpr@fpr=0.1" in named
    assert ["roc_points"] in rows


def test_rerun_reproduces_artifacts(tmp_path):
    """The same config in two directories yields identical artifacts."""
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    assert (a["gallery"] / "index.csv").read_bytes() == \
        (b["gallery"] / "index.csv").read_bytes()
    first_pgm = sorted(p.name for p in a["gallery"].glob("*.pgm"))[0]
    assert (a["gallery"] / first_pgm).read_bytes() == \
        (b["gallery"] / first_pgm).read_bytes()
    assert a["model"].read_bytes() == b["model"].read_bytes()
    # feature rows are keyed by absolute path; compare by file name
    fa = {Path(k).name: v for k, v in read_features(a["features"]).items()}
    fb = {Path(k).name: v for k, v in read_features(b["features"]).items()}
    assert set(fa) == set(fb)
    assert all(np.array_equal(fa[k], fb[k]) for k in fa)
    assert a["report"].read_bytes() == b["report"].read_bytes()


def test_seed_override_matches_config_seed(tmp_path):
    over = tmp_path / "override"
    over.mkdir()
    cfg_over = write_config(over)
    assert main(["synth", "--config", str(cfg_over), "--seed", "99"]) == 0

    baked = tmp_path / "baked"
    baked.mkdir()
    cfg_baked = write_config(baked, seed=99)
    assert main(["synth", "--config", str(cfg_baked)]) == 0

    names = sorted(p.name for p in (over / "gallery").glob("*.pgm"))
    for name in names[:3]:
        assert (over / "gallery" / name).read_bytes() == \
            (baked / "gallery" / name).read_bytes()

    # and the override really changed something vs. the baked-in seed 7
    plain = tmp_path / "plain"
    plain.mkdir()
    assert main(["synth", "--config", str(write_config(plain))]) == 0
    assert (over / "gallery" / names[0]).read_bytes() != \
        (plain / "gallery" / names[0]).read_bytes()


# ---------------------------------------------------------------------------
# config validation and error reporting


def error_of(capsys, argv):
    code = main(argv)
    assert code == 1
    return capsys.readouterr().err


def test_unknown_top_level_key(tmp_path, capsys):
    cfg = write_config(tmp_path, extras={})
    err = error_of(capsys, ["synth", "--config", str(cfg)])
    assert "unknown key(s) in config: extras" in err


def test_unknown_nested_key(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"dir": "g", "rotation": 5})
    err = error_of(capsys, ["synth", "--config", str(cfg)])
    assert "unknown key(s) in data: rotation" in err


def test_config_file_missing(tmp_path, capsys):
    err = error_of(capsys, ["synth", "--config", str(tmp_path / "no.json")])
    assert "config file not found" in err


def test_config_invalid_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    err = error_of(capsys, ["synth", "--config", str(path)])
    assert "invalid JSON" in err


def test_config_requires_seed_and_output_dir(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 1}), encoding="utf-8")
    err = error_of(capsys, ["synth", "--config", str(path)])
    assert "requires 'seed' and 'output_dir'" in err


def test_fpr_target_out_of_range(tmp_path, capsys):
    cfg = write_config(tmp_path, evaluation={"fpr_targets": [1.5]})
    err = error_of(capsys, ["synth", "--config", str(cfg)])
    assert "outside [0, 1)" in err


def test_synth_requires_data_dir(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"n_identities": 4})
    err = error_of(capsys, ["synth", "--config", str(cfg)])
    assert "needs a 'dir' entry" in err


def test_extract_missing_model_file(tmp_path, capsys):
    cfg = write_config(tmp_path)
    err = error_of(capsys, ["extract", "--config", str(cfg),
                            str(tmp_path / "model.bin"),
                            str(tmp_path / "index.csv")])
    assert "file not found" in err


def test_unsupported_extraction_scheme(pipeline, tmp_path, capsys):
    cfg = write_config(tmp_path, extraction={"scheme": "pca"})
    err = error_of(capsys, ["extract", "--config", str(cfg),
                            str(pipeline["model"]),
                            str(pipeline["out"] / "eval_index.csv")])
    assert "unsupported extraction scheme 'pca'" in err


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit):
        main([])


def test_console_script_is_installed():
    exe = shutil.which("pyrcnn")
    assert exe is not None
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True,
                          timeout=60)
    assert proc.returncode == 0
    for command in ("synth", "train", "extract", "eval"):
        assert command in proc.stdout
