from __future__ import annotations

import subprocess
import sys

import pytest

from taxkd import cli
from taxkd.distill import load_checkpoint
from taxkd.inference import read_transitions

SUBCOMMANDS = ["kernel", "featurize", "train", "predict", "eval", "transitions", "simulate"]
TINY_SIM = ["--n-contigs", "80", "--tree-shape", "2,3", "--min-length", "300", "--max-length", "600", "--n-samples", "2"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture
def corpus(tmp_path):
    sim = tmp_path / "sim"
    assert run("simulate", "--out-dir", sim, "--seed", 3, *TINY_SIM) == 0
    return sim


def featurize(corpus, feat):
    assert run("featurize", "--fasta", corpus / "contigs.fasta", "--abundances", corpus / "abundances.tsv",
               "--out", feat, "--min-length", 300) == 0


def pipeline(corpus, out, *train_flags):
    feat = out / "feat.txdf"
    featurize(corpus, feat)
    assert run("train", "--features", feat, "--labels", corpus / "labels.tsv", "--fasta", corpus / "contigs.fasta",
               "--out-dir", out / "model", "--epochs", 3, "--student-hidden", "16", "--embed-dim", 32, *train_flags) == 0
    assert run("predict", "--features", feat, "--checkpoint", out / "model" / "model.txdm", "--out", out / "pred.tsv") == 0
    assert run("eval", "--predictions", out / "pred.tsv", "--truth", corpus / "truth.tsv", "--out", out / "eval.tsv") == 0
    assert run("transitions", "--before", corpus / "labels.tsv", "--after", out / "pred.tsv",
               "--truth", corpus / "truth.tsv", "--out", out / "tr.tsv") == 0
    return out


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    assert run(sub, "--help") == 0
    text = capsys.readouterr().out
    assert "--threads" in text and "--config" in text


def test_train_help_documents_defaults(capsys):
    run("train", "--help")
    text = " ".join(capsys.readouterr().out.split())
    for flag, default in [("--alpha", "0.3"), ("--tau", "4.0"), ("--epochs", "100"), ("--batch-size", "64")]:
        assert flag in text
        assert f"(default: {default})" in text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "taxkd", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout


def test_validation_errors_exit_one(tmp_path, corpus):
    assert run("train", "--alpha", "1.5", "--features", "x", "--labels", "y", "--fasta", "z", "--out-dir", tmp_path) == 1
    assert run("simulate", "--out-dir", tmp_path, "--bogus-flag") == 1
    assert run("eval", "--truth", corpus / "truth.tsv", "--out", tmp_path / "e.tsv") == 1
    assert run("eval", "--predictions", tmp_path / "missing.tsv", "--truth", corpus / "truth.tsv",
               "--out", tmp_path / "e.tsv") == 1
    assert run("simulate", "--out-dir", tmp_path, "--p-wrong", "0.9", "--p-drop", "0.5") == 1
    assert not (tmp_path / "e.tsv").exists()


def test_runtime_error_exits_two(tmp_path, corpus):
    bad = tmp_path / "abund.tsv"
    bad.write_text("contig_id\ts1\nsim_0\t1\n")
    out = tmp_path / "f.txdf"
    assert run("featurize", "--fasta", corpus / "contigs.fasta", "--abundances", bad, "--out", out) == 2
    assert not out.exists()
    assert list(tmp_path.glob("*.partial")) == []


def test_failure_removes_staged_outputs(tmp_path, corpus, monkeypatch):
    feat = tmp_path / "feat.txdf"
    featurize(corpus, feat)

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(cli, "write_loss_history", boom)
    rc = run("train", "--features", feat, "--labels", corpus / "labels.tsv", "--fasta", corpus / "contigs.fasta",
             "--out-dir", tmp_path / "m", "--epochs", 2, "--student-hidden", "8", "--checkpoint-every", 1)
    assert rc == 2
    assert list((tmp_path / "m").iterdir()) == []


def test_simulate_writes_manifest_and_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--out-dir", tmp_path / name, "--seed", 42, *TINY_SIM) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["abundances.tsv", "contigs.fasta", "labels.tsv", "manifest.json", "truth.tsv"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_kernel_dump(tmp_path):
    out = tmp_path / "k.tsv"
    assert run("kernel", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# dimension\t103"
    assert len(lines) == 2 + 256
    assert len(lines[2].split("\t")) == 104


def test_full_pipeline_and_idempotence(tmp_path, corpus):
    a = pipeline(corpus, tmp_path / "a")
    b = pipeline(corpus, tmp_path / "b")
    for rel in ["feat.txdf", "model/model.txdm", "model/loss_history.tsv", "pred.tsv", "eval.tsv", "tr.tsv"]:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    header, row = (a / "eval.tsv").read_text().splitlines()
    assert row.split("\t")[2] == "80"
    assert read_transitions(open(a / "tr.tsv")).sum() == 80
    with open(a / "model" / "model.txdm", "rb") as fh:
        ck = load_checkpoint(fh)
    assert ck.config.epochs == 3 and ck.config.student_hidden == (16,)
    assert len(ck.history) == 3


def test_config_file_precedence(tmp_path, corpus):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# shared settings\nepochs = 2\nalpha=0.6\nstudent-hidden = 8\n")
    out = pipeline(corpus, tmp_path / "c", "--config", cfg, "--alpha", "0.4")
    with open(out / "model" / "model.txdm", "rb") as fh:
        ck = load_checkpoint(fh)
    # flags beat the file, the file beats built-in defaults
    assert ck.config.alpha == 0.4
    assert ck.config.student_hidden == (16,)
    assert ck.config.epochs == 3
    assert ck.config.tau == 4.0
    cfg.write_text("epochs = 2\n")
    args = cli.parse_args(["train", "--config", str(cfg), "--features", "f", "--labels", "l", "--out-dir", "o"])
    assert args.epochs == 2


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 3\n")
    assert run("train", "--config", cfg, "--features", "f", "--labels", "l", "--out-dir", tmp_path) == 1


def test_checkpoint_every(tmp_path, corpus):
    feat = tmp_path / "feat.txdf"
    featurize(corpus, feat)
    assert run("train", "--features", feat, "--labels", corpus / "labels.tsv", "--fasta", corpus / "contigs.fasta",
               "--out-dir", tmp_path / "m", "--epochs", 4, "--student-hidden", "8", "--checkpoint-every", 2) == 0
    names = sorted(p.name for p in (tmp_path / "m").iterdir())
    assert names == ["loss_history.tsv", "model.epoch0002.txdm", "model.txdm"]


def test_train_with_embedding_file(tmp_path, corpus):
    import numpy as np

    from taxkd.features import read_feature_cache
    from taxkd.teacher import write_embedding_file

    feat = tmp_path / "feat.txdf"
    featurize(corpus, feat)
    with open(feat, "rb") as fh:
        ids = read_feature_cache(fh).contig_ids
    emb = tmp_path / "emb.txde"
    with open(emb, "wb") as fh:
        write_embedding_file(ids, np.random.default_rng(0).normal(size=(len(ids), 12)), fh)
    assert run("train", "--features", feat, "--labels", corpus / "labels.tsv", "--embeddings", emb,
               "--out-dir", tmp_path / "m", "--epochs", 1, "--student-hidden", "8") == 0
    with open(emb, "wb") as fh:
        write_embedding_file(ids[1:], np.zeros((len(ids) - 1, 12)), fh)
    assert run("train", "--features", feat, "--labels", corpus / "labels.tsv", "--embeddings", emb,
               "--out-dir", tmp_path / "m2", "--epochs", 1, "--student-hidden", "8") == 2
