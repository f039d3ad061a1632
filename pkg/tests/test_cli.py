import csv
import json
import os

import pytest

from modtune import cli
from modtune import model as M

COMMON = {"model.preset": "toy", "model.L": 2, "train.epochs": 1}


def write_cfg(path, **kv):
    path.write_text("".join(f"{k} = {v}\n" for k, v in {**COMMON, **kv}.items()))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("pre")
    cfg = write_cfg(d / "pre.cfg", **{"task.kind": "pretrain-mlm", "task.size": 200, "task.dev_size": 40,
                                      "train.lr": 1e-3, "train.seeds": 0, "io.checkpoint": d / "pre.mwt"})
    assert cli.main(["pretrain", "--config", cfg, "--out", str(d / "out")]) == 0
    manifest = json.loads((d / "out" / "manifest.json").read_text())
    assert manifest["checkpoint_hash"] == cli.blob_hash(d / "pre.mwt")
    assert (d / "out" / "config.txt").read_bytes() == (d / "pre.cfg").read_bytes()
    return d / "pre.mwt"


def finetune_cfg(tmp_path, ckpt, **kv):
    base = {"task.kind": "pair-classify", "task.size": 64, "task.dev_size": 32,
            "train.lr": 1e-2, "train.seeds": 0, "io.checkpoint": ckpt}
    return write_cfg(tmp_path / "ft.cfg", **{**base, **kv})


def test_blob_hash_matches_git(tmp_path):
    p = tmp_path / "hello"
    p.write_bytes(b"hello\n")
    # `git hash-object` of "hello\n"
    assert cli.blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_layer_norm_finetune_summary(tmp_path, ckpt):
    cfg = finetune_cfg(tmp_path, ckpt, regime="LayerNorms")
    assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    (row,) = rows(tmp_path / "o" / "summary.csv")
    assert list(row) == list(cli.SUMMARY_COLUMNS)
    # 2 layers x 2 norms x (gamma + beta) x 64, plus a 64x2+2 head
    assert int(row["trainable"]) == 2 * 2 * 2 * 64 + 130
    assert row["status"] == "ok" and row["regime"] == "LayerNorms"
    assert (tmp_path / "o" / "checkpoints" / "seed0.mwt").is_file()
    report = json.loads((tmp_path / "o" / "reports.jsonl").read_text())
    assert "wall_clock" not in report
    assert report["frozen_digest_before"] == report["frozen_digest_after"]


def test_single_layer_selection(tmp_path, ckpt):
    cfg = finetune_cfg(tmp_path, ckpt, regime="SingleLayerLN", layers=1)
    assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    (row,) = rows(tmp_path / "o" / "summary.csv")
    assert row["layers"] == "1" and int(row["trainable"]) == 2 * 2 * 64 + 130


def test_seed_flag_overrides(tmp_path, ckpt):
    cfg = finetune_cfg(tmp_path, ckpt, regime="Freeze", **{"train.seeds": "0 1"})
    assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "4"]) == 0
    assert [r["seed"] for r in rows(tmp_path / "o" / "summary.csv")] == ["4"]


def test_sweep_grid(tmp_path, ckpt):
    cfg = finetune_cfg(tmp_path, ckpt, regime="BitFit", **{"train.lr_sweep": "1e-3 1e-2", "train.seeds": "0 1"})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    grid = rows(tmp_path / "o" / "summary.csv")
    assert len(grid) == 4
    assert {(float(r["lr"]), int(r["seed"])) for r in grid} == {(1e-3, 0), (1e-3, 1), (1e-2, 0), (1e-2, 1)}
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["best_lr"] in (1e-3, 1e-2)
    per_lr = manifest["per_lr"][repr(manifest["best_lr"])]
    assert per_lr[0] == manifest["mean"] and per_lr[2] == 2


def test_analyze_outputs(tmp_path):
    fresh = tmp_path / "fresh.mwt"
    M.save_checkpoint(M.build_model(M.preset("toy", num_layers=2), seed=0), fresh)
    cfg = write_cfg(tmp_path / "an.cfg", **{"task.kind": "pair-classify", "task.size": 32, "task.dev_size": 8,
                                            "io.checkpoint": fresh, "analyze.n_outliers": 4})
    assert cli.main(["analyze", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    stats = json.loads((out / "stats.json").read_text())
    assert stats["LayerNorm"]["bimodal"] and not stats["FeedForward"]["bimodal"]
    outliers = json.loads((out / "outliers.json").read_text())
    assert len(outliers) == 4 and all(len(o["indices"]) == 4 for o in outliers)
    table = json.loads((out / "ratio_table.json").read_text())
    full = next(r for r in table if r["regime"] == "FullFT")
    assert full["trainable"] == full["total"]
    assert {f"hist_{t}.csv" for t in ("MultiHead", "FeedForward", "LN_Att", "LN_FFN", "LayerNorm")} <= set(os.listdir(out))


def test_benchmark_writes_tables(tmp_path, ckpt):
    cfg = finetune_cfg(tmp_path, ckpt, **{"task.size": 32, "task.dev_size": 16, "train.lr_sweep": "1e-2"})
    assert cli.main(["benchmark", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    table = json.loads((tmp_path / "o" / "table.json").read_text())["pair-classify"]
    assert [r["regime"] for r in table][:2] == ["FullFT", "Freeze"]
    assert len(table) == 13
    text = (tmp_path / "o" / "table_pair-classify.txt").read_text()
    assert "OutlierLN(n=256)" in text


class TestExitCodes:
    def test_missing_checkpoint_fails_before_compute(self, tmp_path, capsys):
        cfg = finetune_cfg(tmp_path, tmp_path / "nope.mwt")
        assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "checkpoint not found" in capsys.readouterr().err
        assert not (tmp_path / "o" / "reports.jsonl").exists()

    def test_pretrain_needs_checkpoint_path(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "p.cfg", **{"task.kind": "pretrain-mlm"})
        assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "io.checkpoint" in capsys.readouterr().err

    def test_bad_config_line(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("model.preset = toy\nfoo = 1\n")
        assert cli.main(["finetune", "--config", str(p)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["sweep", "--config", str(tmp_path / "none.cfg")]) == 2

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.mwt"
        bad.write_bytes(b"not a checkpoint")
        assert cli.main(["finetune", "--config", finetune_cfg(tmp_path, bad), "--out", str(tmp_path / "o")]) == 2

    def test_wrong_depth(self, tmp_path, ckpt):
        cfg = finetune_cfg(tmp_path, ckpt, **{"model.L": 3})
        assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_invalid_selection(self, tmp_path, ckpt):
        cfg = finetune_cfg(tmp_path, ckpt, regime="SingleLayerLN", layers=7)
        assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_run_exits_one(self, tmp_path, ckpt, capsys):
        cfg = finetune_cfg(tmp_path, ckpt, **{"train.lr": 1e300, "train.epochs": 2})
        assert cli.main(["finetune", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        assert "failed run" in capsys.readouterr().err
        (row,) = rows(tmp_path / "o" / "summary.csv")
        assert row["status"] == "failed"
