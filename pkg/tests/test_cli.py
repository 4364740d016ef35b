import json
import subprocess
import sys

import pytest

from emt.cli import build_parser, main
from emt.tgc import load_features


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def _subparsers(parser):
    return parser._subparsers._group_actions[0].choices


def test_help_exits_zero_and_documents_flags(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit) as e:
        parser.parse_args(["--help"])
    assert e.value.code == 0
    for name, sub in _subparsers(parser).items():
        with pytest.raises(SystemExit) as e:
            parser.parse_args([name, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            assert action.help, f"{name}: {action.dest} has no help text"
            for opt in action.option_strings:
                assert opt in text


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "emt", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "datagen" in proc.stdout


def test_usage_errors_exit_2(tmp_path):
    assert main(["train", "--bogus", "--out", str(tmp_path)]) == 2
    assert main(["nosuch"]) == 2
    assert main(["datagen", "--out", str(tmp_path / "d")]) == 2  # --task missing
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_an_option": 1}))
    assert main(["datagen", "--task", "clas", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_datagen_deterministic_and_guarded(tmp_path):
    args = ["datagen", "--task", "clas", "--seed", "7", "--n-trials", "2", "--duration", "20",
            "--channels", "4", "--out", str(tmp_path / "d")]
    assert main(args) == 0
    first = _tree(tmp_path / "d")
    assert "manifest.jsonl" in first and "resolved_config.json" in first
    assert main(args) == 1  # refuses to overwrite
    assert main(args + ["--force"]) == 0
    assert _tree(tmp_path / "d") == first
    assert main(args[:-1] + [str(tmp_path / "e"), "--workers", "2"]) == 0
    other = _tree(tmp_path / "e")
    assert {k: v for k, v in other.items() if k != "resolved_config.json"} == \
        {k: v for k, v in first.items() if k != "resolved_config.json"}


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task": "clas", "seed": 3, "n_trials": 1, "duration": 20,
                               "channels": 4}))
    assert main(["datagen", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "d")]) == 0
    snap = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
    assert snap["seed"] == 5 and snap["n_trials"] == 1 and snap["task"] == "classification"
    assert not any("time" in k for k in snap)


def test_extract_features_seed62_preset(tmp_path):
    assert main(["datagen", "--task", "clas", "--n-trials", "1", "--duration", "24",
                 "--channels", "4", "--out", str(tmp_path / "d")]) == 0
    assert main(["extract-features", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
                 "--preset", "seed62", "--out", str(tmp_path / "f")]) == 0
    rows = [json.loads(l) for l in (tmp_path / "f" / "features.jsonl").read_text().splitlines()]
    assert all(r["seq"] == 37 and r["f"] == 7 for r in rows)
    feats, _, _ = load_features(tmp_path / "f" / rows[0]["file"])
    assert feats.shape[1:] == (37, 4, 7)
    assert main(["extract-features", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
                 "--preset", "faced32", "--out", str(tmp_path / "g")]) == 0
    row = json.loads((tmp_path / "g" / "features.jsonl").read_text().splitlines()[0])
    assert row["seq"] == 17


def test_train_eval_export_regression(tmp_path):
    r = tmp_path / "r"
    assert main(["train", "--task", "regr", "--variant", "S", "--n-trials", "5",
                 "--duration", "60", "--channels", "4", "--epochs", "1", "--window", "48",
                 "--hop", "24", "--out", str(r)]) == 0
    for name in ("last.ckpt", "metrics.json", "loss_curve.csv", "resolved_config.json"):
        assert (r / name).exists()
    assert main(["eval", "--ckpt", str(r / "last.ckpt")]) == 0
    metrics = json.loads((r / "eval_test" / "metrics.json").read_text())
    assert {"rmse", "pcc", "ccc"} <= set(metrics)
    assert metrics == {**json.loads((r / "metrics.json").read_text()), "loss_history": [],
                       "extra": metrics["extra"]}
    assert main(["eval", "--ckpt", str(r / "last.ckpt"), "--split", "val", "--dump-hidden",
                 "--dump-limit", "1", "--out", str(tmp_path / "ev")]) == 0
    assert sorted(p.name for p in (tmp_path / "ev" / "hidden").iterdir()) == \
        ["val_0000_tct.csv", "val_0000_tokens.csv"]
    assert main(["export-adjacency", "--ckpt", str(r / "last.ckpt"),
                 "--manifest", str(r / "data" / "manifest.jsonl"), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "adjacency_branch1.csv").read_text().startswith(",ch00,ch01")


def test_train_from_features_and_resume(tmp_path):
    assert main(["datagen", "--task", "clas", "--n-trials", "2", "--duration", "24",
                 "--channels", "4", "--out", str(tmp_path / "d")]) == 0
    assert main(["extract-features", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
                 "--out", str(tmp_path / "f")]) == 0
    common = ["train", "--features", str(tmp_path / "f"), "--variant", "S", "--epochs", "2"]
    assert main(common + ["--out", str(tmp_path / "t")]) == 0
    assert main(common + ["--out", str(tmp_path / "u")]) == 0
    assert (tmp_path / "t" / "last.ckpt").read_bytes() == (tmp_path / "u" / "last.ckpt").read_bytes()
    assert main(common + ["--resume", str(tmp_path / "t" / "last.ckpt"), "--out", str(tmp_path / "t")]) == 0
    assert main(common + ["--lr", "0.1", "--resume", str(tmp_path / "t" / "last.ckpt"),
                          "--out", str(tmp_path / "t")]) == 1


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--variant", "S", "--no-tct", "--channels", "4", "--seq", "4",
                 "--n-coords", "8", "--out", str(tmp_path / "g")]) == 0
    report = json.loads((tmp_path / "g" / "gradreport.json").read_text())
    assert report["classification-S"]["passed"] is True


def test_runtime_errors_exit_1(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "e")]) == 1
    assert main(["extract-features", "--manifest", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "f")]) == 1
    assert main(["datagen", "--task", "clas", "--preset", "nope", "--out", str(tmp_path / "g")]) == 1
