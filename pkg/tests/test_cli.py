import json

import numpy as np
import pytest

from bidistill import cli
from bidistill.formats import read_pred

SMALL = ["--count", "3", "--views", "4", "--image-size", "64", "--points", "400", "--epochs", "4"]


def run(argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    code, paths = run(["pipeline", "--seed", "7", "--out", out, *SMALL])
    assert code == 0
    return out, paths


def test_pipeline_artifacts(pipeline_dir, capsys):
    out, paths = pipeline_dir
    names = {p.name for p in paths}
    assert {"report.json", "loss.csv", "model.npz", "alignment.json"} <= names
    assert (out / "distill" / "loss.csv").read_text().startswith("epoch,mean_loss,phase\n")
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 7 and report["num_shapes"] == 3
    assert 0 <= report["miou_3d"] <= 1 and len(report["per_part_iou_3d"]) == 4


def test_pipeline_deterministic(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    code, _ = run(["pipeline", "--seed", "7", "--out", tmp_path, *SMALL])
    assert code == 0
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_stages_compose(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    gen = ["--count", "3", "--points", "400"]
    assert run(["generate", "--seed", "7", "--out", tmp_path / "c", *gen])[0] == 0
    assert run(["render", "--corpus", tmp_path / "c", "--out", tmp_path / "v", "--views", "4",
                "--image-size", "64"])[0] == 0
    assert run(["extract", "--seed", "7", "--corpus", tmp_path / "c", "--views-dir", tmp_path / "v",
                "--out", tmp_path / "u"])[0] == 0
    assert run(["distill", "--seed", "7", "--corpus", tmp_path / "c", "--units", tmp_path / "u",
                "--out", tmp_path / "d", "--epochs", "4"])[0] == 0
    for p in (out / "distill").glob("*.pred"):
        assert read_pred(p).tolist() == read_pred(tmp_path / "d" / p.name).tolist()


def test_file_teacher(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    code, _ = run(["extract", "--seed", "7", "--corpus", out / "corpus", "--views-dir", out / "views",
                   "--teacher", "file", "--predictions", out / "units", "--out", tmp_path])
    assert code == 0
    a = np.load(out / "units" / "chair-0000.units.npz")
    b = np.load(tmp_path / "chair-0000.units.npz")
    np.testing.assert_array_equal(a["masks"], b["masks"])


def test_tta_arity(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    with pytest.raises(SystemExit) as exc:
        run(["distill", "--corpus", out / "corpus", "--units", out / "units", "--out", tmp_path,
             "--mode", "tta"])
    assert exc.value.code == 2


def test_file_teacher_needs_predictions(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    with pytest.raises(SystemExit):
        run(["extract", "--corpus", out / "corpus", "--views-dir", out / "views", "--teacher", "file",
             "--out", tmp_path])


def test_missing_input(tmp_path, capsys):
    code, _ = run(["render", "--corpus", tmp_path / "nope", "--out", tmp_path / "v"])
    assert code == 1 and "not found" in capsys.readouterr().err


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 2\npoints = 300\n")
    code, paths = run(["generate", "--config", cfg, "--count", "1", "--out", tmp_path / "c"])
    assert code == 0 and len(paths) == 1
    assert (tmp_path / "c" / "chair-0000.xyzl").read_text().startswith("300 4\n")
    cfg.write_text("bogus = 1\n")
    with pytest.raises(SystemExit):
        run(["generate", "--config", cfg, "--out", tmp_path / "c"])


def test_exclude_uncovered_lowers_baseline_free_student(pipeline_dir, tmp_path):
    out, _ = pipeline_dir
    full = json.loads((out / "report.json").read_text())
    assert run(["eval", "--corpus", out / "corpus", "--views-dir", out / "views", "--distill-dir",
                out / "distill", "--out", tmp_path, "--exclude-uncovered"])[0] == 0
    excl = json.loads((tmp_path / "report.json").read_text())
    assert excl["exclude_uncovered"] is True
    assert excl["baseline_miou_3d"] == full["baseline_miou_3d"]
    if full["uncovered_count"]:
        assert excl["miou_3d"] <= full["miou_3d"]


def test_dump_images(tmp_path):
    code, paths = run(["pipeline", "--out", tmp_path, "--count", "1", "--views", "2", "--image-size",
                       "32", "--points", "200", "--epochs", "2", "--dump-images"])
    assert code == 0
    suffixes = {p.name.split(".", 2)[-1] for p in paths}
    assert {"depth.pgm", "gt.ppm", "seg.ppm"} <= suffixes


def test_threads_env(monkeypatch):
    monkeypatch.setenv("PARTDISTILL_THREADS", "1")
    assert cli.threads() == 1
    monkeypatch.setenv("PARTDISTILL_THREADS", "x")
    with pytest.raises(cli.UsageError):
        cli.threads()


def test_parallel_matches_serial(pipeline_dir, tmp_path, monkeypatch):
    out, _ = pipeline_dir
    monkeypatch.setenv("PARTDISTILL_THREADS", "4")
    monkeypatch.setattr(cli.os, "cpu_count", lambda: 4)
    assert run(["render", "--corpus", out / "corpus", "--out", tmp_path, "--views", "4",
                "--image-size", "64"])[0] == 0
    a = np.load(out / "views" / "chair-0001.views.npz")
    b = np.load(tmp_path / "chair-0001.views.npz")
    assert a["pixel_owner"].tobytes() == b["pixel_owner"].tobytes()
