import csv
import json
import os
import subprocess
import sys

import pytest

from adaperceiver.cli import ExperimentConfig, aggregate_records, main
from adaperceiver.model import ConfigTuple, load_checkpoint
from adaperceiver.policy import read_records, run_policy
from adaperceiver.data import ingest_dataset

TINY = {
    "seed": 1,
    "model": {
        "dim": 16, "heads": 2, "depth": 2, "n_latents": 8, "token_grans": [2, 4, 8],
        "widths": [8, 12, 16], "depths": [1, 2], "layer_scale_init": 0.1,
    },
    "training": {
        "schedule": [{"stage": "token_only", "epochs": 1, "lr": 3e-3}, {"stage": "all", "epochs": 1, "lr": 3e-3}],
        "batch_size": 32,
    },
    "dataset": {"name": "synthetic", "n_train": 128, "n_val": 32, "n_test": 48, "seed": 2},
    "policies": [
        {"kind": "baseline", "t": 4},
        {"kind": "ee", "t": 8, "tau": 0.5},
        {"kind": "rl", "lam": 0.05, "epochs": 1, "n_train": 64},
        {"kind": "rl_ee", "lam": 0.05, "epochs": 1, "n_train": 64, "tau": 0.9},
    ],
}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def test_train_artifacts(run):
    root, _ = run
    out = root / "run"
    for name in ("experiment.json", "metrics.csv", "val.csv", "test.csv", "final.npz", "stage0_token_only.npz", "stage1_all.npz"):
        assert (out / name).exists(), name
    assert len(_rows(out / "metrics.csv")) == 1 + 2 * 4
    model, extra, state = load_checkpoint(out / "final.npz")
    assert model.config.dim == 16 and extra["stage"] == "all" and state


def test_train_is_byte_identical(run, tmp_path):
    root, cfg = run
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("metrics.csv", "val.csv", "test.csv", "experiment.json"):
        assert (tmp_path / name).read_bytes() == (root / "run" / name).read_bytes()


def test_eval_roundtrip(run, tmp_path):
    root, _ = run
    ckpt = root / "run" / "final.npz"
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--depths", "1", "2"]) == 0
    rows = _rows(tmp_path / "pareto.csv")
    assert rows[0] == ["config", "t", "w", "l", "accuracy", "flops", "pareto"]
    assert len(rows) == 1 + 3 * 3 * 2
    agg = aggregate_records(read_records(tmp_path / "records.csv"))
    flops = [float(r[5]) for r in rows[1:]]
    assert flops == sorted(flops)
    for label, t, w, l, acc, fl, _ in rows[1:]:
        a, f = agg[ConfigTuple(int(t), int(w), int(l))]
        assert repr(float(a)) == acc and repr(float(f)) == fl


def test_eval_singleton_matches_baseline(run, tmp_path):
    root, cfg = run
    ckpt = root / "run" / "final.npz"
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--tokens", "4", "--widths", "12"]) == 0
    rows = _rows(tmp_path / "pareto.csv")
    assert len(rows) == 2
    model, _, _ = load_checkpoint(ckpt)
    split = ingest_dataset(TINY["dataset"]).test
    res = run_policy("baseline", split, model, {"t": 4, "w": 12, "l": 2})
    assert float(rows[1][4]) == res.accuracy


def test_policy_and_oracle(run, tmp_path):
    root, _ = run
    ckpt = str(root / "run" / "final.npz")
    assert main(["policy", "--checkpoint", ckpt, "--out", str(tmp_path / "a")]) == 0
    assert main(["policy", "--checkpoint", ckpt, "--out", str(tmp_path / "b")]) == 0
    table = _rows(tmp_path / "a" / "policy.csv")
    assert table[0] == ["policy", "accuracy", "gflops", "exit_histogram"] and len(table) == 5
    assert (tmp_path / "a" / "policy.csv").read_bytes() == (tmp_path / "b" / "policy.csv").read_bytes()
    dumps = sorted(p.name for p in (tmp_path / "a" / "records").iterdir())
    assert len(dumps) == 4
    for name in dumps:
        assert len(read_records(tmp_path / "a" / "records" / name)) == 48

    assert main(["oracle", "--checkpoint", ckpt, "--out", str(tmp_path / "o")]) == 0
    oracle_acc = float(_rows(tmp_path / "o" / "policy.csv")[1][1])
    assert json.loads((tmp_path / "o" / "oracle.json").read_text())
    assert main(["eval", "--checkpoint", ckpt, "--out", str(tmp_path / "e"), "--depths", "1", "2"]) == 0
    assert all(oracle_acc >= 100 * float(r[4]) for r in _rows(tmp_path / "e" / "pareto.csv")[1:])


def test_flops(capsys, run):
    assert main(["flops", "--preset", "paper-table2", "--tokens", "256"]) == 0
    assert "GFLOPs" in capsys.readouterr().out
    root, _ = run
    assert main(["flops", "--checkpoint", str(root / "run" / "final.npz"), "--tokens", "3"]) == 0
    assert "t3-w16-l2" in capsys.readouterr().out


def test_gradcheck(capsys):
    assert main(["gradcheck", "--max-entries", "4"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--max-entries", "4", "--tolerance", "0"]) == 1


def test_selftest_subset(tmp_path, capsys):
    assert main(["selftest", "--only", "mask_slice", "rope_relative", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "selftest.csv")
    assert rows[0] == ["check", "passed", "value", "tolerance"] and [r[0] for r in rows[1:]] == ["mask_slice", "rope_relative"]


def test_dump_config(capsys):
    assert main(["--dump-config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert ExperimentConfig.from_dict(doc).to_dict() == doc


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["eval", "--out", "x"],
        ["policy", "--checkpoint", "missing.npz", "--out", "x"],
        ["train", "--config", "missing.json"],
        ["--threads", "0", "flops", "--preset", "toy"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"sed": 3}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "sed" in capsys.readouterr().err


def test_thread_env_var(tmp_path):
    env = dict(os.environ, ADAPERCEIVER_THREADS="1")
    out = subprocess.run([sys.executable, "-m", "adaperceiver", "flops", "--preset", "toy"], env=env, capture_output=True, text=True)
    assert out.returncode == 0 and "total" in out.stdout
    env["ADAPERCEIVER_THREADS"] = "many"
    out = subprocess.run([sys.executable, "-m", "adaperceiver", "flops", "--preset", "toy"], env=env, capture_output=True, text=True)
    assert out.returncode == 2 and "ADAPERCEIVER_THREADS" in out.stderr
