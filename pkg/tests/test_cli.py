import json
import subprocess
import sys

import pytest

from groupbnn.evolution import write_genome
from groupbnn.pipeline import cli, stages
from groupbnn.training_engine import DivergenceError


def run_cli(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:  # argparse
        return exc.code


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run_cli() == 1
    assert run_cli("bogus") == 1
    assert run_cli("flops", "--seed", "-3") == 1
    assert run_cli("flops", "--config", tmp_path / "missing.toml") == 1


def test_help_exits_0():
    assert run_cli("--help") == 0


def test_flops_command(tiny_run, capsys):
    path, run, splits = tiny_run
    assert run_cli("flops", "--config", path) == 0
    out = capsys.readouterr().out
    assert "blocks.0.conv3" in out and "total" in out


def test_flops_with_genome_file(tiny_run, tmp_path, capsys):
    path, run, splits = tiny_run
    config = stages.network_for(run, splits)
    write_genome(tmp_path / "g.toml", [1] * len(config.slots()))
    assert run_cli("flops", "--config", path, "--genome", tmp_path / "g.toml") == 0
    write_genome(tmp_path / "bad.toml", [3] * len(config.slots()))
    assert run_cli("flops", "--config", path, "--genome", tmp_path / "bad.toml") == 1


def test_data_error_exits_2(tiny_run, tmp_path):
    path, run, splits = tiny_run
    (path.parent / "data" / "train-labels-idx1-ubyte.gz").write_bytes(b"\x00\x00\x08\x01\x00")
    assert run_cli("train-supernet", "--config", path, "--out", tmp_path / "o") == 2


def test_divergence_exits_3(tiny_run, tmp_path, monkeypatch):
    path, _, _ = tiny_run

    def boom(*a, **k):
        raise DivergenceError(4, float("inf"))

    monkeypatch.setattr(stages.Trainer, "train_epoch", boom)
    assert run_cli("train-supernet", "--config", path, "--out", tmp_path / "o") == 3


def test_missing_genome_exits_1(tiny_run, tmp_path):
    path, _, _ = tiny_run
    assert run_cli("retrain", "--config", path, "--out", tmp_path / "o") == 1


def test_run_all_then_eval(tiny_run, tmp_path, capsys):
    path, _, _ = tiny_run
    out = tmp_path / "o"
    assert run_cli("run-all", "--config", path, "--out", out, "--seed", "11", "--deterministic") == 0
    for name in ("supernet.ckpt", "supernet_metrics.csv", "search_history.csv", "best_genome.toml",
                 "search_summary.json", "model.ckpt", "retrain_metrics.csv", "eval.json",
                 "run_config.toml"):
        assert (out / name).exists(), name
    assert "seed = 11" in (out / "run_config.toml").read_text()
    capsys.readouterr()
    assert run_cli("eval", "--config", path, "--out", out, "--split", "val") == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["split"] == "val" and 0 <= result["top1"] <= 1
    # stage-by-stage reruns reuse the files written above
    assert run_cli("search", "--config", path, "--out", out, "--seed", "11") == 0
    assert run_cli("retrain", "--config", path, "--out", out, "--seed", "11") == 0


def test_console_module_entry_point(tiny_run):
    path, _, _ = tiny_run
    proc = subprocess.run([sys.executable, "-m", "groupbnn.pipeline.cli", "flops", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
