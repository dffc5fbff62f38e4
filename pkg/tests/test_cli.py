"""End-to-end command-line driver tests on a miniature configuration."""

import json
import os

import pytest

from tsqa.cli import EXIT_CONFIG, EXIT_IO, main

TINY = [
    "--override", "data.engines=50",
    "--override", "data.cycles=10",
    "--override", "data.channels=8",
    "--override", "data.length=120",
    "--override", "data.understanding=100",
    "--override", "data.perception=100",
    "--override", "data.reasoning=100",
    "--override", "data.decision=100",
    "--override", "model.d=32",
    "--override", "model.heads=2",
    "--override", "model.layers=1",
    "--override", "model.lit_length=4",
    "--override", "model.encoder_layers=1",
    "--override", "model.encoder_heads=2",
    "--override", "model.lm_blocks=1",
    "--override", "model.lm_heads=2",
    "--override", "model.patch_len=30",
    "--override", "model.stride=30",
    "--override", "train.epochs=1",
    "--override", "train.batch_size=4",
    "--override", "eval.limit=20",
]


def run_cli(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    code = run_cli(["gen-data", "--seed", "7", "--out-dir", out] + TINY)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ckpt"))
    code = run_cli(["train", "--seed", "7", "--data", dataset, "--out", out] + TINY)
    assert code == 0
    return out


def test_gen_data_requires_seed(tmp_path):
    code = run_cli(["gen-data", "--out-dir", str(tmp_path)] + TINY)
    assert code == EXIT_CONFIG


def test_gen_data_artifacts(dataset):
    for name in ("train.jsonl", "test.jsonl", "vocab.txt", "config.cfg"):
        assert os.path.exists(os.path.join(dataset, name)), name
    with open(os.path.join(dataset, "train.jsonl")) as fh:
        rec = json.loads(fh.readline())
    assert {"task", "question", "answer", "series"} <= set(rec)


def test_gen_data_saved_config_records_seed(dataset):
    text = open(os.path.join(dataset, "config.cfg")).read()
    assert "[run]" in text and "seed = 7" in text


def test_gen_data_unwritable_dir():
    code = run_cli(["gen-data", "--seed", "1",
                    "--out-dir", "/proc/definitely/not/writable"] + TINY)
    assert code == EXIT_IO


def test_bad_override_is_config_error(tmp_path):
    code = run_cli(["gen-data", "--seed", "1", "--out-dir", str(tmp_path),
                    "--override", "model.width=64"])
    assert code == EXIT_CONFIG


def test_missing_config_file_is_io_error(tmp_path):
    code = run_cli(["gen-data", "--seed", "1", "--out-dir", str(tmp_path),
                    "--config", "/nonexistent.cfg"])
    assert code == EXIT_IO


def test_train_missing_data(tmp_path):
    code = run_cli(["train", "--seed", "1", "--data", str(tmp_path),
                    "--out", str(tmp_path / "out")] + TINY)
    assert code == EXIT_IO


def test_train_artifacts(checkpoint):
    for name in ("config.cfg", "vocab.txt", "checkpoint.itck", "metrics.csv"):
        assert os.path.exists(os.path.join(checkpoint, name)), name
    with open(os.path.join(checkpoint, "metrics.csv")) as fh:
        assert fh.readline().strip() == "step,epoch,loss,grad_norm,frozen_ok"


def test_eval_runs(checkpoint, dataset, capsys):
    code = run_cli(["eval", "--seed", "7",
                    "--checkpoint", checkpoint, "--data", dataset])
    assert code == 0
    out = capsys.readouterr().out
    assert "Task" in out
    start = out.index("{")
    payload = json.loads(out[start:])
    assert "metrics" in payload


def test_eval_missing_checkpoint(tmp_path, dataset):
    code = run_cli(["eval", "--seed", "7",
                    "--checkpoint", str(tmp_path), "--data", dataset])
    assert code == EXIT_IO


def test_inspect_fresh_model(capsys):
    code = run_cli(["inspect", "--seed", "0"] + TINY)
    assert code == 0
    out = capsys.readouterr().out
    assert "trainable parameters:" in out
    assert "frozen parameters:" in out
    assert "module shapes:" in out


def test_inspect_checkpoint(checkpoint, capsys):
    code = run_cli(["inspect", "--seed", "7", "--checkpoint", checkpoint])
    assert code == 0
    out = capsys.readouterr().out
    assert "trainable ratio:" in out


def test_bench_small_grid(tmp_path, capsys):
    out_dir = str(tmp_path / "bench")
    code = run_cli(["bench", "--seed", "0", "--grid", "small", "--out", out_dir,
                    "--override", "bench.reps=30", "--override", "bench.warmup=1",
                    "--override", "model.lit_length=4", "--override", "model.d=16",
                    "--override", "model.heads=2"])
    assert code == 0
    csv_path = os.path.join(out_dir, "efficiency.csv")
    assert os.path.exists(csv_path)
    with open(csv_path) as fh:
        header = fh.readline().strip()
    assert header == "V,Lp,Lq,n,d,ita_ms,cross_ms,ita_flops,cross_flops,speedup"
    assert os.path.exists(os.path.join(out_dir, "efficiency.gp"))
