"""End-to-end tests for the command-line interface and its exit codes."""

import json
import xml.etree.ElementTree as ET

import pytest

from speechlens.cli import main


CORPUS_CONF = {
    "n_train": 8, "n_test": 4,
    "sentences_per_speech": [2, 4], "tokens_per_sentence": [4, 6],
    "vocab_size": 16, "patch_grid": [2, 2], "d_patch": 4,
    "signal_fraction": 0.5, "signal_strength": 2.5,
    "evidence_vocab": 3, "evidence_token_count": 2,
    "evidence_patch_count": 2, "seed": 11,
}

RUN_CONF = {
    "model": {"d_model": 8, "n_heads": 2, "d_ff": 16, "text_layers": 1,
              "audio_layers": 1, "fusion_layers": 1, "speech_layers": 1},
    "train": {"learning_rate": 1e-3, "epochs": 2, "accumulation_steps": 4,
              "batch_size": 8, "max_sentences": 6, "seed": 0},
}


@pytest.fixture()
def corpus_dir(tmp_path):
    conf = tmp_path / "corpus.json"
    conf.write_text(json.dumps(CORPUS_CONF))
    out = tmp_path / "corpus"
    assert main(["gen", "--config", str(conf), "--out", str(out)]) == 0
    return out


@pytest.fixture()
def run_conf(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(RUN_CONF))
    return path


class TestGen:
    def test_writes_expected_layout(self, corpus_dir):
        assert (corpus_dir / "meta.json").exists()
        assert (corpus_dir / "evidence_key.json").exists()
        assert (corpus_dir / "train" / "0000.smp").exists()
        assert (corpus_dir / "test" / "0003.smp").exists()

    def test_missing_config_path_exits_1(self, tmp_path, capsys):
        code = main(["gen", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "c")])
        assert code == 1
        assert "nope.json" in capsys.readouterr().err

    def test_config_with_defaults_only(self, tmp_path, capsys):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps(dict(CORPUS_CONF, n_train=2, n_test=2)))
        assert main(["gen", "--config", str(conf),
                     "--out", str(tmp_path / "c")]) == 0
        assert "2 train" in capsys.readouterr().out


class TestUsageErrors:
    def test_unknown_flag_exits_1(self, capsys):
        assert main(["gen", "--frobnicate", "x"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_subcommand_exits_1(self, capsys):
        assert main([]) == 1

    def test_bad_arch_choice_exits_1(self, tmp_path, capsys):
        code = main(["train", "--arch", "gigantic", "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")])
        assert code == 1

    def test_help_exits_0(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--help"])
        assert excinfo.value.code == 0
        assert "gen" in capsys.readouterr().out


class TestPipeline:
    def test_train_eval_interpret(self, corpus_dir, run_conf, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--arch", "proposed", "--data", str(corpus_dir),
                     "--config", str(run_conf), "--out", str(run)]) == 0
        ckpt = run / "proposed.ckpt"
        assert ckpt.exists()
        assert (run / "train_log_proposed.jsonl").exists()
        records = [json.loads(line) for line in
                   (run / "train_log_proposed.jsonl").read_text().splitlines()]
        assert {"epoch", "step", "loss"} == set(records[0])
        capsys.readouterr()

        assert main(["eval", "--checkpoint", str(ckpt),
                     "--data", str(corpus_dir)]) == 0
        out = capsys.readouterr().out
        assert "precision=" in out and "recall=" in out and "f1=" in out

        interp = tmp_path / "interp"
        assert main(["interpret", "--checkpoint", str(ckpt),
                     "--data", str(corpus_dir), "--sample-id", "0",
                     "--top-k", "2", "--out", str(interp)]) == 0
        doc = json.loads((interp / "interpretation.json").read_text())
        assert len(doc["selected"]) == 2
        assert (interp / "sentence_scores.svg").exists()
        token_svgs = list(interp.glob("sentence*_tokens.svg"))
        assert len(token_svgs) == 2
        for svg in token_svgs:
            ET.parse(svg)  # well-formed XML

    def test_interpret_accepts_participant_id(self, corpus_dir, run_conf,
                                              tmp_path, capsys):
        run = tmp_path / "run"
        main(["train", "--arch", "proposed", "--data", str(corpus_dir),
              "--config", str(run_conf), "--out", str(run)])
        interp = tmp_path / "interp"
        assert main(["interpret", "--checkpoint", str(run / "proposed.ckpt"),
                     "--data", str(corpus_dir), "--sample-id", "test-0001",
                     "--out", str(interp)]) == 0
        assert "test-0001" in capsys.readouterr().out

    def test_interpret_unknown_sample_exits_2(self, corpus_dir, run_conf,
                                              tmp_path, capsys):
        run = tmp_path / "run"
        main(["train", "--arch", "proposed", "--data", str(corpus_dir),
              "--config", str(run_conf), "--out", str(run)])
        code = main(["interpret", "--checkpoint", str(run / "proposed.ckpt"),
                     "--data", str(corpus_dir), "--sample-id", "ghost",
                     "--out", str(tmp_path / "i")])
        assert code == 2
        assert "ghost" in capsys.readouterr().err

    def test_interpret_rejects_baseline_checkpoint(self, corpus_dir, run_conf,
                                                   tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--arch", "baseline", "--data", str(corpus_dir),
                     "--config", str(run_conf), "--out", str(run)]) == 0
        code = main(["interpret", "--checkpoint", str(run / "baseline.ckpt"),
                     "--data", str(corpus_dir), "--sample-id", "0",
                     "--out", str(tmp_path / "i")])
        assert code == 2
        assert "proposed" in capsys.readouterr().err

    def test_eval_missing_checkpoint_exits_1(self, corpus_dir, capsys):
        code = main(["eval", "--checkpoint", "does-not-exist.ckpt",
                     "--data", str(corpus_dir)])
        assert code == 1

    def test_corrupt_checkpoint_exits_2(self, corpus_dir, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"definitely not a checkpoint")
        code = main(["eval", "--checkpoint", str(bad),
                     "--data", str(corpus_dir)])
        assert code == 2


class TestCompare:
    def test_prints_two_metric_triples_and_writes_artifacts(
            self, corpus_dir, run_conf, tmp_path, capsys):
        out = tmp_path / "cmp"
        assert main(["compare", "--data", str(corpus_dir),
                     "--config", str(run_conf), "--out", str(out)]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines()
                 if "f1=" in l]
        assert len(lines) == 2
        assert lines[0].startswith("proposed:")
        assert lines[1].startswith("baseline:")
        for name in ("proposed.ckpt", "baseline.ckpt", "report.json",
                     "metrics.csv", "predictions.csv", "metrics.png",
                     "loss_curves.png", "train_log_proposed.jsonl",
                     "train_log_baseline.jsonl"):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert set(report["reports"]) == {"proposed", "baseline"}
