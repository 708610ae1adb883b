import json
import subprocess
import sys

import yaml

from specattack.cli import build_parser, main

from conftest import tiny_config


def _run(argv, capsys, monkeypatch=None, env=None):
    if monkeypatch is not None:
        for k, v in (env or {}).items():
            monkeypatch.setenv(k, v)
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_subcommands_exist():
    parser = build_parser()
    for cmd in ("ingest", "augment", "spectrogram", "train", "attack", "transfer", "report", "pipeline"):
        args = parser.parse_args([cmd, "--toy", "--dry-run"])
        assert args.command == cmd and args.toy and args.dry_run


def test_dry_run_prints_resolved_config(tmp_path, capsys):
    code, out, _ = _run(["pipeline", "--toy", "--dry-run", "--seed", "4", "--workers", "2", "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    rec = json.loads(out)
    assert rec["valid"] and rec["config"]["seed"] == 4 and rec["config"]["workers"] == 2
    assert not (tmp_path / "o").exists()


def test_missing_dataset_path_names_field(tmp_path, capsys):
    code, out, err = _run(["ingest", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    rec = json.loads(err)
    assert rec["error"] == "ConfigError" and rec["field"] == "dataset.root"
    assert "nope" in rec["message"]


def test_env_overrides_and_config_env(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"attacks": {"samples": 7}, "out": str(tmp_path / "o")}))
    code, out, _ = _run(["train", "--dry-run"], capsys, monkeypatch,
                        {"SPECATTACK_CONFIG": str(cfg), "SPECATTACK_TRAIN__MAX_EPOCHS": "5"})
    assert code == 0
    c = json.loads(out)["config"]
    assert c["attacks"]["samples"] == 7 and c["train"]["max_epochs"] == 5


def test_bad_config_reports_all_violations(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"workers": 0, "attacks": {"samples": 0}}))
    code, _, err = _run(["report", "--config", str(cfg), "--toy", "--dry-run"], capsys)
    assert code == 2
    fields = [v["field"] for v in json.loads(err)["violations"]]
    assert fields == ["attacks.samples", "workers", "out"]


def test_runtime_error_exit_one(tmp_path, capsys):
    # the report stage needs attack logs that do not exist yet
    code, _, err = _run(["report", "--toy", "--out", str(tmp_path / "o")], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_staged_commands_via_config(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(tiny_config(tmp_path / "o")))
    for cmd in ("ingest", "spectrogram", "train", "attack", "transfer", "report"):
        code, out, err = _run([cmd, "--config", str(cfg)], capsys)
        assert code == 0, err
        assert json.loads(out)["status"] == "ok"
    assert (tmp_path / "o" / "report.json").exists()


def test_console_entry_point_module():
    proc = subprocess.run([sys.executable, "-m", "specattack.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "pipeline" in proc.stdout
