"""End-to-end command line checks, run in process via main(argv)."""

import os
from pathlib import Path

import numpy as np
import pytest

from satkit.cli import main

MODEL_FLAGS = ["--feature-dim", "4", "--vocab-size", "7", "--d-m", "8",
               "--n-heads", "2", "--d-ff", "16", "--n-enc-blocks", "1",
               "--n-pred-blocks", "1", "--d-joint", "8", "--dropout", "0.0"]


def gen_args(out, seed=3):
    return ["gen-data", "--task", "delayed-copy", "--vocab-size", "4",
            "--feature-dim", "4", "--min-tokens", "2", "--max-tokens", "4",
            "--noise", "0.2", "--seed", str(seed), "--n-train", "12",
            "--n-dev", "4", "--n-test", "4", "--out", str(out)]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(gen_args(out)) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--data", str(data_dir), "--out", str(out),
                 *MODEL_FLAGS, "--epochs", "2", "--batch-size", "4",
                 "--lr", "0.05", "--seed", "0"])
    assert code == 0
    return out


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_gen_data_is_byte_identical(tmp_path, data_dir):
    other = tmp_path / "again"
    assert main(gen_args(other)) == 0
    assert tree_bytes(other) == tree_bytes(data_dir)
    different = tmp_path / "seed9"
    assert main(gen_args(different, seed=9)) == 0
    assert tree_bytes(different) != tree_bytes(other)


def test_train_outputs(run_dir, capsys):
    for name in ("last.ckpt", "best.ckpt", "model.config", "metrics.csv"):
        assert (run_dir / name).exists(), name
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("step,lr,")
    assert len(lines) > 2


def test_train_rejects_config_data_conflicts(tmp_path, data_dir, capsys):
    flags = list(MODEL_FLAGS)
    flags[flags.index("7")] = "9"  # vocab-size that contradicts vocab.txt
    code = main(["train", "--data", str(data_dir), "--out",
                 str(tmp_path / "x"), *flags, "--epochs", "1"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "vocab_size" in err


def test_decode_offline_and_determinism(run_dir, data_dir, tmp_path, capsys):
    hyp1 = tmp_path / "hyp1.txt"
    args = ["decode", "--checkpoint", str(run_dir / "best.ckpt"), "--data",
            str(data_dir), "--split", "dev", "--beam-width", "2"]
    assert main(args + ["--out", str(hyp1)]) == 0
    out = capsys.readouterr().out
    assert "corpus CER" in out
    hyp2 = tmp_path / "hyp2.txt"
    assert main(args + ["--out", str(hyp2)]) == 0
    assert hyp1.read_bytes() == hyp2.read_bytes()
    ids = [line.split()[0] for line in hyp1.read_text().splitlines()]
    assert ids == sorted(ids) and len(ids) == 4


def test_decode_nbest_file(run_dir, data_dir, tmp_path):
    hyp = tmp_path / "hyp.txt"
    assert main(["decode", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--beam-width",
                 "3", "--nbest", "3", "--out", str(hyp)]) == 0
    lines = (tmp_path / "hyp.txt.nbest").read_text().splitlines()
    assert lines
    for line in lines:
        utt, rank, score = line.split()[:3]
        assert utt.startswith("delayed-copy-dev-")
        assert int(rank) in (1, 2, 3)
        float(score)


def test_decode_streaming_mode(run_dir, data_dir, tmp_path):
    hyp = tmp_path / "stream.txt"
    assert main(["decode", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--mode",
                 "streaming", "--chunk-left", "3", "--chunk-right", "1",
                 "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 4


def test_decode_chunk_override_needs_both(run_dir, data_dir, tmp_path, capsys):
    code = main(["decode", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--chunk-left",
                 "3", "--out", str(tmp_path / "x.txt")])
    assert code == 1
    assert "chunk" in capsys.readouterr().err


def test_eval_cer(run_dir, data_dir, tmp_path, capsys):
    hyp = tmp_path / "hyp.txt"
    main(["decode", "--checkpoint", str(run_dir / "best.ckpt"), "--data",
          str(data_dir), "--split", "dev", "--out", str(hyp)])
    capsys.readouterr()
    assert main(["eval-cer", "--ref", f"{data_dir}/dev/text", "--hyp",
                 str(hyp)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("corpus CER ")
    float(out.split()[-1])
    # a hypothesis file missing utterances is an error
    (tmp_path / "short.txt").write_text(hyp.read_text().splitlines()[0] + "\n")
    assert main(["eval-cer", "--ref", f"{data_dir}/dev/text", "--hyp",
                 str(tmp_path / "short.txt")]) == 1
    assert "missing" in capsys.readouterr().err


def test_lm_train(data_dir, tmp_path, capsys):
    out = tmp_path / "lm.txt"
    assert main(["lm-train", "--text", f"{data_dir}/train/text",
                 "--skip-utt-ids", "--order", "2", "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("order 2,") and "perplexity" in stdout
    from satkit.ngram import NgramModel
    lm = NgramModel.load(out)
    # utterance ids were dropped, so only task tokens remain
    assert all(tok.startswith("t") or tok.startswith("<") or tok == "</s>"
               for tok in lm.vocab)


def test_lm_fusion_decode(run_dir, data_dir, tmp_path):
    lm = tmp_path / "lm.txt"
    main(["lm-train", "--text", f"{data_dir}/train/text", "--skip-utt-ids",
          "--order", "2", "--out", str(lm)])
    hyp = tmp_path / "fused.txt"
    assert main(["decode", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--lm", str(lm),
                 "--lm-weight", "0.2", "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 4


def test_plot_lattice_contracts(run_dir, data_dir, tmp_path, capsys):
    prefix = tmp_path / "plot"
    assert main(["plot-lattice", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--utt",
                 "delayed-copy-dev-00000", "--full-vocab", "--out-prefix",
                 str(prefix)]) == 0
    out = capsys.readouterr().out
    assert "frames x" in out and "hypothesis:" in out

    lines = (tmp_path / "plot.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["frame", "u"]
    assert header[2:][:3] == ["<blank>", "<sos>", "<unk>"]
    for line in lines[1:]:
        vals = [float(v) for v in line.split(",")[2:]]
        # each trace row is one full softmax over the vocab
        assert sum(vals) == pytest.approx(1.0, abs=1e-9)
        assert all(0.0 <= v <= 1.0 for v in vals)

    blob = (tmp_path / "plot.pgm").read_bytes()
    head, payload = blob.split(b"\n", 1)
    magic, width, height, maxval = head.split()
    assert magic == b"P5" and maxval == b"255"
    n_tokens = len(header) - 2
    frames = max(int(line.split(",")[0]) for line in lines[1:]) + 1
    assert int(width) == frames and int(height) == n_tokens
    assert len(payload) == frames * n_tokens


def test_plot_lattice_unknown_utt(run_dir, data_dir, tmp_path, capsys):
    assert main(["plot-lattice", "--checkpoint", str(run_dir / "best.ckpt"),
                 "--data", str(data_dir), "--split", "dev", "--utt", "nope",
                 "--out-prefix", str(tmp_path / "x")]) == 1
    assert "not in" in capsys.readouterr().err


def test_bench_smoke(capsys):
    assert main(["bench", "--d-m", "8", "--lengths", "12,24", "--threads",
                 "1,2", "--repeats", "1"]) == 0
    out = capsys.readouterr().out
    assert "active lattice backend:" in out
    assert " 12 " in out and " 24 " in out
    assert "lattice" in out


def test_resume_from_cli(run_dir, data_dir, tmp_path, capsys):
    out = tmp_path / "resumed"
    assert main(["train", "--data", str(data_dir), "--out", str(out),
                 "--resume", str(run_dir / "last.ckpt")]) == 0
    stdout = capsys.readouterr().out
    # the stored config says 2 epochs and the checkpoint is at epoch 2, so
    # nothing new runs and nothing already-done is re-printed
    assert "epoch" not in stdout


def test_missing_data_is_diagnosed(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nothere"), "--out",
                 str(tmp_path / "o"), *MODEL_FLAGS]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_flag_exits_via_argparse(capsys):
    with pytest.raises(SystemExit):
        main(["decode", "--no-such-flag"])
