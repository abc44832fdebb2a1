import json

import pytest

from contnet.cli import run


def test_summary_text(capsys):
    assert run(["summary", "--variant", "m"]) == 0
    out = capsys.readouterr().out
    assert "golden params" in out and "golden flops" in out


def test_summary_tsv(capsys):
    assert run(["summary", "--variant", "ti", "--format", "tsv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t")[:3] == ["layer", "kind", "params"]


@pytest.mark.parametrize("flags", [["--groups", "8"], ["--pe", "relative"], ["--patch-schedule", "all14"],
                                   ["--groups", "depthwise", "--pe", "none"]])
def test_summary_ablation_flags(flags, capsys):
    assert run(["summary", "--variant", "s", *flags]) == 0
    assert "total" in capsys.readouterr().out


def test_shapes_trace(capsys):
    assert run(["shapes", "--variant", "m"]) == 0
    out = capsys.readouterr().out
    for size in ("56x56", "28x28", "14x14", "7x7"):
        assert size in out


def test_gradcheck_passes(capsys):
    assert run(["gradcheck", "--max-entries", "2", "--top", "3"]) == 0
    assert "worst relative error" in capsys.readouterr().out


def test_synth_train_eval(tmp_path, capsys):
    data = tmp_path / "d.ctds"
    ckpt = tmp_path / "m.ck"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"variant": "tiny"}, "train": {"steps": 3, "batch_size": 16}}))
    assert run(["synth", "--out", str(data), "--count", "32", "--seed", "7"]) == 0
    assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(ckpt)]) == 0
    assert ckpt.exists()
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
    assert capsys.readouterr().out.startswith("top1 ")


def test_unknown_flag_exits_one(capsys):
    assert run(["summary", "--variant", "s", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_command_exits_one():
    assert run([]) == 1


def test_bad_config_key_exits_one(tmp_path, capsys):
    data = tmp_path / "d.ctds"
    run(["synth", "--out", str(data), "--count", "8"])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    assert run(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "x")]) == 1
    assert "unknown" in capsys.readouterr().err


def test_missing_dataset_exits_one(tmp_path):
    assert run(["eval", "--ckpt", str(tmp_path / "none.ck"), "--data", str(tmp_path / "none.ctds")]) == 1


def test_corrupt_dataset_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.ctds"
    bad.write_bytes(b"CTDX" + bytes(40))
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{}")
    assert run(["train", "--config", str(cfg), "--data", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "magic" in capsys.readouterr().err


def test_ablate_groups(capsys):
    assert run(["ablate", "--axis", "groups", "--choice", "1", "--choice", "8"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("choice") and len(lines) == 3


def test_ablate_unknown_choice_exits_one():
    assert run(["ablate", "--axis", "pe", "--choice", "sinusoidal"]) == 1
