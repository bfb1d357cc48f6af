import contextlib
import io
from pathlib import Path

import pytest
import yaml

from prefmod import cli
from prefmod.checkpoint import load_checkpoint

from conftest import TINY


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (Path(out.strip().splitlines()[-1]) if code == 0 else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    return root, cfg


@pytest.fixture(scope="module")
def pipeline(workspace):
    """gen-data, pretrain and train-stage1 through the CLI."""
    root, cfg = workspace
    common = ["--config", cfg, "--run-dir", root / "runs"]
    out = {}

    def go(*argv):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main([str(a) for a in argv])
        assert code == 0, argv
        return Path(buf.getvalue().strip().splitlines()[-1])

    out["data"] = go("gen-data", *common) / "dataset"
    out["stage0"] = go("pretrain", *common, "--data", out["data"]) / "stage0.ckpt"
    out["stage1"] = go("train-stage1", *common, "--data", out["data"], "--base", out["stage0"]) / "stage1.ckpt"
    out["common"] = common
    return out


def test_run_dir_naming_and_manifest(pipeline):
    run = pipeline["stage0"].parent
    stamp_date, stamp_time, fp, command = run.name.split("-", 3)
    assert len(stamp_date) == 8 and len(stamp_time) == 6 and command == "pretrain"
    assert load_checkpoint(pipeline["stage0"]).fingerprint == fp
    assert {"manifest.json", "config.yaml", "metrics.csv", "stage0.ckpt"} <= {p.name for p in run.iterdir()}


def test_sample_and_eval_outputs(pipeline, capsys):
    c = pipeline["common"]
    code, run_dir, _ = run(capsys, "sample", *c, "--checkpoint", pipeline["stage1"],
                           "--prompt", "circle two left", "--user", "none", "--user", "0")
    assert code == 0
    assert {"grid.ppm", "grid.f64", "manifest.json", "cells"} <= {p.name for p in run_dir.iterdir()}
    code, ev_dir, _ = run(capsys, "eval", *c, "--data", pipeline["data"], "--checkpoint", pipeline["stage1"])
    assert code == 0
    assert {"report.json", "metrics.csv", "grid.ppm", "manifest.json"} <= {p.name for p in ev_dir.iterdir()}


def test_report_rerun_byte_identical(pipeline, capsys):
    c = pipeline["common"]
    _, ev_dir, _ = run(capsys, "eval", *c, "--data", pipeline["data"], "--checkpoint",
                       pipeline["stage1"], "--no-grid")
    _, a, _ = run(capsys, "report", *c, ev_dir)
    _, b, _ = run(capsys, "report", *c, ev_dir)
    assert a != b
    for name in ("report.json", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_new_user_and_sweep(pipeline, capsys):
    c = pipeline["common"]
    code, d, _ = run(capsys, "train-new-user", *c, "--data", pipeline["data"],
                     "--checkpoint", pipeline["stage1"], "--user", "3", "--history", "2")
    assert code == 0 and (d / "new_user.ckpt").is_file()
    code, _, _ = run(capsys, "sample", *c, "--checkpoint", pipeline["stage1"],
                     "--embedding", d / "new_user.ckpt")
    assert code == 0
    code, s, _ = run(capsys, "history-sweep", *c, "--data", pipeline["data"], "--checkpoint",
                     pipeline["stage1"], "--lengths", "2", "--modes", "direct", "--users", "1",
                     "--seeds", "1")
    assert code == 0
    assert (s / "metrics.csv").read_text().count("\n") == 2


def test_resume_flag(pipeline, capsys):
    c = pipeline["common"]
    code, d, _ = run(capsys, "train-stage1", *c, "--data", pipeline["data"], "--base",
                     pipeline["stage0"], "--stop-at", "4")
    assert code == 0
    code, e, _ = run(capsys, "train-stage1", *c, "--data", pipeline["data"], "--base",
                     pipeline["stage0"], "--resume", d / "stage1.ckpt")
    assert code == 0
    assert (e / "stage1.ckpt").read_bytes() == pipeline["stage1"].read_bytes()


def test_missing_inputs_listed_together(workspace, capsys):
    root, cfg = workspace
    code, _, err = run(capsys, "train-stage1", "--config", cfg, "--run-dir", root / "runs",
                       "--data", root / "nope", "--base", root / "nope.ckpt")
    assert code == cli.EXIT_DATA
    assert "--data" in err and "--base" in err


def test_config_errors(workspace, capsys):
    root, cfg = workspace
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--run-dir", root / "runs",
                       "--set", "backbone.heads=3")
    assert code == cli.EXIT_CONFIG and "divisible" in err
    code, _, _ = run(capsys, "gen-data", "--run-dir", root / "runs", "--set", "nonsense.key=1")
    assert code == cli.EXIT_CONFIG
    code, _, _ = run(capsys, "gen-data", "--run-dir", root / "runs", "--config", root / "missing.yaml")
    assert code == cli.EXIT_DATA


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--frobnicate"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit):
        cli.main([])


def test_exit_codes_distinct():
    codes = [cli.EXIT_OK, cli.EXIT_USAGE, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_NUMERIC]
    assert len(set(codes)) == len(codes) and codes[0] == 0
