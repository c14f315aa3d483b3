import json
import subprocess
import sys

import numpy as np
import pytest
from conftest import tiny_config

import urepa.gradcheck as gc
from urepa.cli import main
from urepa.config import dump_config
from urepa.model import depth_to_stage


def write_config(path, **changes):
    path.write_text(dump_config(tiny_config(**changes)))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml", **{"model.blocks_per_stage": [2, 2, 2]})
    assert run("train", "--config", cfg, "--out", root / "run", "--iters", 20, "--seed", 3) == 0
    return root


def test_train_writes_one_row_per_iter(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    assert run("train", "--config", cfg, "--out", tmp_path / "a", "--iters", 200) == 0
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 201
    for name in ("config.yaml", "run_meta.yaml", "timing.csv", "last.urck"):
        assert (tmp_path / "a" / name).exists()


def test_train_same_seed_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    for d in ("a", "b"):
        assert run("train", "--config", cfg, "--out", tmp_path / d, "--iters", 10, "--seed", 7) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_resume_extends_run(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--iters", 4) == 0
    assert run("train", "--config", cfg, "--out", out, "--iters", 6, "--resume", out / "last.urck") == 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 7


def test_missing_teacher_file_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", **{"teacher.provider": "file",
                                                   "teacher.path": str(tmp_path / "nope.urft")})
    assert run("train", "--config", cfg, "--out", tmp_path / "x", "--iters", 1) == 1
    assert "nope.urft" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trainer:\n  iters: 3\n  learning_rate: 0.1\n")
    assert run("train", "--config", bad, "--out", tmp_path / "x") == 1
    assert "learning_rate" in capsys.readouterr().err


def test_export_features_round_trip_into_file_provider(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    feats = tmp_path / "teacher.urft"
    assert run("export-features", "--config", cfg, "--output", feats) == 0
    stub_cfg = write_config(tmp_path / "stub.yaml")
    file_cfg = write_config(tmp_path / "file.yaml", **{"teacher.provider": "file", "teacher.path": str(feats)})
    assert run("train", "--config", stub_cfg, "--out", tmp_path / "s", "--iters", 5) == 0
    assert run("train", "--config", file_cfg, "--out", tmp_path / "f", "--iters", 5) == 0
    assert (tmp_path / "s" / "metrics.csv").read_bytes() == (tmp_path / "f" / "metrics.csv").read_bytes()
    assert "provenance: file" in (tmp_path / "f" / "run_meta.yaml").read_text()


def test_probe_depth_rows_and_determinism(trained, tmp_path, capsys):
    ck = trained / "run" / "last.urck"
    for d in ("a", "b"):
        assert run("probe-depth", "--checkpoint", ck, "--out", tmp_path / d, "--probe-steps", 3) == 0
    a = json.loads((tmp_path / "a" / "probe_report.json").read_text())
    b = json.loads((tmp_path / "b" / "probe_report.json").read_text())
    assert a == b
    cfg = tiny_config(**{"model.blocks_per_stage": [2, 2, 2]}).model
    assert [r["depth"] for r in a["rows"]] == list(range(1, 7))
    for r in a["rows"]:
        info = depth_to_stage(cfg, r["depth"])
        assert (r["stage"], r["height"], r["width"]) == (info.name, info.height, info.width)
        assert -1 <= r["mean_sim"] <= 1
    assert run("probe-depth", "--checkpoint", ck, "--depths", "9", "--probe-steps", 1) == 1


def test_sample_cfg_one_matches_unguided_and_is_deterministic(trained, tmp_path):
    ck = trained / "run" / "last.urck"
    common = ["sample", "--checkpoint", ck, "--num", 4, "--steps", 5, "--seed", 2]
    assert run(*common, "--out", tmp_path / "g", "--cfg-scale", 1.0, "--interval", "0,1") == 0
    assert run(*common, "--out", tmp_path / "u", "--cfg-scale", 1.0, "--interval", "0,0") == 0
    assert run(*common, "--out", tmp_path / "g2", "--cfg-scale", 1.0, "--interval", "0,1") == 0
    g = (tmp_path / "g" / "samples.npy").read_bytes()
    assert g == (tmp_path / "u" / "samples.npy").read_bytes()
    assert g == (tmp_path / "g2" / "samples.npy").read_bytes()
    arr = np.load(tmp_path / "g" / "samples.npy")
    assert arr.shape == (4, 4, 8, 8) and np.isfinite(arr).all()
    for name in ("samples_u8.npy", "labels.npy", "samples.png", "sample_config.json"):
        assert (tmp_path / "g" / name).exists()


def test_sample_bad_interval_exits_1(trained, tmp_path):
    ck = trained / "run" / "last.urck"
    assert run("sample", "--checkpoint", ck, "--out", tmp_path, "--interval", "0.9,0.1") == 1


def test_gradcheck_lists_every_op_once(tmp_path, capsys):
    out = tmp_path / "gc.txt"
    assert run("gradcheck", "--seeds", 1, "--out", out) == 0
    text = out.read_text()
    for chk in gc.REGISTRY:
        assert sum(line.split()[0] == chk.name for line in text.splitlines()[1:]) == 1
    assert "FAIL" not in text


def test_gradcheck_failure_exits_2(monkeypatch, capsys):
    from test_gradcheck import broken_check

    monkeypatch.setattr(gc, "REGISTRY", (gc.GradCheck("broken", broken_check, seeds=1),))
    assert run("gradcheck") == 2
    assert "FAIL" in capsys.readouterr().out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "urepa", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "sample", "probe-depth", "gradcheck", "export-features"):
        assert cmd in proc.stdout
