from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from eq4d.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main

SMALL = {
    "data": {"num_train": 3, "num_val": 2,
             "scene": {"num_objects": 3, "points_per_object": 40, "points_ground": 150, "points_per_wall": 40}},
    "net": {"width": 4, "levels": 2},
    "train": {"epochs": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def read_csv(path: Path) -> list[list[str]]:
    return [r for r in csv.reader(path.read_text().splitlines()) if r and not r[0].startswith("#")]


def test_gen_train_eval_round(cfg_file, tmp_path):
    ds, run, ev = tmp_path / "ds", tmp_path / "run", tmp_path / "ev"
    assert main(["gen", "--config", str(cfg_file), "--out", str(ds), "-q"]) == EXIT_OK
    manifest = json.loads((ds / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 3 and manifest["generator_seed"] == 0
    assert (ds / "config.json").exists()

    assert main(["train", "--config", str(cfg_file), "--data", str(ds), "--out", str(run), "-q"]) == EXIT_OK
    assert {"config.json", "last.ckpt", "train_log.csv", "metrics.json", "metrics.csv"} <= {p.name for p in run.iterdir()}
    log = read_csv(run / "train_log.csv")
    assert log[0][0] == "config_hash" and len(log) == 2

    assert main(["eval", "--checkpoint", str(run / "last.ckpt"), "--data", str(ds), "--out", str(ev), "-q"]) == EXIT_OK
    rows = read_csv(ev / "metrics.csv")
    assert rows[0][0] == "config_hash" and len(rows) == 2
    assert (ev / "sequences" / "0000" / "predictions" / "000000.label").exists()

    gt = tmp_path / "gt"
    assert main(["eval", "--config", str(cfg_file), "--predictions", str(ds / "val"), "--data", str(ds),
                 "--out", str(gt), "-q"]) == EXIT_OK
    assert json.loads((gt / "metrics.json").read_text())["lstq"] == 1.0

    ply = tmp_path / "x.ply"
    scan = ds / "val" / "sequences" / "0000"
    assert main(["convert", str(scan / "velodyne" / "000000.bin"), "--label", str(scan / "labels" / "000000.label"),
                 "--out", str(ply), "-q"]) == EXIT_OK
    assert ply.read_text().startswith("ply\n")

    audit = tmp_path / "audit"
    assert main(["audit-equivariance", "--checkpoint", str(run / "last.ckpt"), "--set", "audit.clouds=1",
                 "--out", str(audit), "-q"]) == EXIT_OK


def test_eval_rejects_class_mismatch(cfg_file, tmp_path):
    ds, run = tmp_path / "ds", tmp_path / "run"
    main(["gen", "--config", str(cfg_file), "--out", str(ds), "-q"])
    main(["train", "--config", str(cfg_file), "--data", str(ds), "--out", str(run), "-q", "--set", "data.num_val=0"])
    code = main(["eval", "--checkpoint", str(run / "last.ckpt"), "--data", str(ds), "--out", str(tmp_path / "e"),
                 "--set", "net.num_classes=5", "-q"])
    assert code == EXIT_CONFIG


def test_resume_with_other_config_is_schema_error(cfg_file, tmp_path):
    ds, run = tmp_path / "ds", tmp_path / "run"
    main(["gen", "--config", str(cfg_file), "--out", str(ds), "-q"])
    base = ["train", "--config", str(cfg_file), "--data", str(ds), "--out", str(run), "-q"]
    assert main(base) == EXIT_OK
    assert main(base + ["--resume", "--seed", "5"]) == EXIT_CONFIG


def test_audit_exit_codes(tmp_path):
    common = ["--set", "audit.clouds=1", "--set", "audit.max_points=60", "--set", "audit.orders=[1,4]",
              "--precision", "f64", "-q"]
    assert main(["audit-equivariance", "--out", str(tmp_path / "a")] + common) == EXIT_OK
    rows = read_csv(tmp_path / "a" / "audit.csv")
    assert rows[0][:2] == ["config_hash", "layer"]
    n1 = [r for r in rows[1:] if r[2] == "1"]
    assert n1 and all(float(r[6]) == 0.0 for r in n1)
    bad = ["audit-equivariance", "--out", str(tmp_path / "b"), "--corrupt-permutation"] + common
    assert main(bad) == EXIT_VALIDATION


def test_scaling_command(tmp_path, capsys):
    assert main(["scaling", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "scaling.csv").read_text()
    assert "983040" in text and "311296" in text and "158760" in text
    assert text.strip().endswith("# below_baseline=true")
    assert main(["scaling", "--K", "4", "--orders", "1,2,4", "-q"]) == EXIT_OK
    assert (tmp_path / "config.json").exists()


def test_config_and_io_errors(tmp_path):
    assert main(["scaling", "--set", "nonsense.key=1", "-q"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["scaling", "--config", str(bad), "-q"]) == EXIT_CONFIG
    assert main(["scaling", "--config", str(tmp_path / "missing.json"), "-q"]) == EXIT_IO
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "-q"]) == EXIT_IO
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r"), "-q"]) == EXIT_IO
    assert main(["eval", "-q"]) == EXIT_CONFIG
