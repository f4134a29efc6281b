import json

import numpy as np
import pytest

from vqgnn.cli import main
from vqgnn.serialize import read_metrics

SMALL = ["--hidden", "8", "--codebook-size", "16", "--batch-size", "50", "--layers", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "sbm"
    assert main(["gen", "--kind", "sbm", "--n", "200", "--classes", "2", "--p-in", "0.05", "--p-out", "0.005",
                 "--seed", "7", "--out", str(d)]) == 0
    return d


def test_gen_is_deterministic(tmp_path, dataset):
    again = tmp_path / "again"
    assert main(["gen", "--kind", "sbm", "--n", "200", "--classes", "2", "--p-in", "0.05", "--p-out", "0.005",
                 "--seed", "7", "--out", str(again)]) == 0
    for f in ("edges.tsv", "features.bin", "labels.tsv", "splits.tsv"):
        assert (again / f).read_bytes() == (dataset / f).read_bytes()


def test_gen_er(tmp_path):
    assert main(["gen", "--kind", "er", "--n", "50", "--p", "0.1", "--out", str(tmp_path / "er")]) == 0
    assert (tmp_path / "er" / "features.bin").is_file()


def test_train_then_infer(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--epochs", "2", "--out", str(out)] + SMALL) == 0
    assert len(read_metrics(out / "metrics.jsonl")) == 2
    assert (out / "curve.csv").is_file() and (out / "checkpoint.vqgn").is_file()
    assert main(["infer", "--checkpoint", str(out / "checkpoint.vqgn"), "--data", str(dataset)]) == 0
    rows = (out / "predictions.tsv").read_text().splitlines()
    assert len(rows) == 200 and rows[0].split("\t")[0] == "0"
    assert "test_acc" in capsys.readouterr().out


def test_train_with_config_file(tmp_path, dataset):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"hidden": 8, "codebook_size": 16, "batch_size": 50, "layers": 2, "epochs": 1,
                               "data": str(dataset)}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 3 and saved["hidden"] == 8


def test_zero_lr_full_batch_keeps_loss_constant(tmp_path, dataset):
    out = tmp_path / "lr0"
    assert main(["train", "--data", str(dataset), "--lr", "0", "--epochs", "3", "--out", str(out),
                 "--hidden", "8", "--codebook-size", "16", "--batch-size", "200", "--layers", "2"]) == 0
    losses = [r["train_loss"] for r in read_metrics(out / "metrics.jsonl")]
    assert np.allclose(losses, losses[0], rtol=1e-6)


def test_sweep_codebook_size(tmp_path, dataset):
    out = tmp_path / "sweep"
    assert main(["sweep", "--data", str(dataset), "--flag", "codebook-size", "--values", "8,32,128",
                 "--epochs", "3", "--out", str(out), "--hidden", "8", "--batch-size", "50", "--layers", "2"]) == 0
    eps = [np.mean(read_metrics(out / f"codebook-size={k}" / "metrics.jsonl")[-1]["eps_per_layer"])
           for k in (8, 32, 128)]
    assert eps[0] >= eps[1] >= eps[2]


def test_input_errors_exit_1(tmp_path, dataset, capsys):
    assert main(["train", "--data", str(tmp_path / "missing")]) == 1
    assert main(["train", "--data", str(dataset), "--sampler", "cluster"]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--data", str(dataset), "--lr", "abc"]) == 1
    assert main(["sweep", "--data", str(dataset), "--flag", "layers", "--values", "x", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "x.vqgn"
    bad.write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(bad), "--data", str(dataset)]) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_failure_exits_2(tmp_path, dataset):
    assert main(["train", "--data", str(dataset), "--lr", "1e30", "--epochs", "3", "--out", str(tmp_path / "x"),
                 "--dtype", "float32"] + SMALL) == 2


def test_verify_bounds_suite(tmp_path):
    out = tmp_path / "report.jsonl"
    assert main(["verify", "--suite", "bounds", "--trials", "5", "--out", str(out)]) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    summaries = [l for l in lines if l.get("suite") == "bounds"]
    assert len(summaries) == 7 and all(s["passed"] == s["trials"] == 5 for s in summaries)
