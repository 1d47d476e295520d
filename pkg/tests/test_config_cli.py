"""Config parsing and the command-line interface."""

import os
import shutil
import subprocess

import pytest

from acvi import cli
from acvi.cli import blob_hash, main, split_overrides
from acvi.config import DESK_PHASES, TrainConfig, parse_phases, preset
from acvi.data import synth_task, write_text_corpus
from acvi.errors import ConfigError
from acvi.metrics import parse_report

LETTERS = "abcdefgh"
SMALL = ["--model=sa", "--coverage=false", "--hidden=32", "--embed=16", "--attn=32", "--out_hidden=32",
         "--phases=600:8:8", "--vocab_max_size=16"]


def read_manifest(directory):
    with open(os.path.join(directory, "manifest.txt"), encoding="utf-8") as fh:
        return parse_report(fh.read())


@pytest.fixture(scope="module")
def copy_run(tmp_path_factory):
    """A small copy-task corpus over letter tokens and a model trained on it through the CLI."""
    root = tmp_path_factory.mktemp("copy")
    pairs = [([LETTERS[int(t[1:])] for t in s], [LETTERS[int(t[1:])] for t in s])
             for s, _ in synth_task("copy", 0, 400, 8, 2, 5)]
    corpus = str(root / "corpus.tsv")
    write_text_corpus(corpus, pairs)
    out = str(root / "run")
    assert main(["train", "--data", corpus, "--out", out, "--seed", "3"] + SMALL) == 0
    return root, corpus, out


class TestConfig:
    def test_defaults_round_trip_through_text(self):
        cfg = TrainConfig(model="acvi", kl_weight=0.25, phases=((3, 4, 5), (6, 7, 8)))
        assert TrainConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key_suggests_nearest(self):
        with pytest.raises(ConfigError, match="gumble_temperature.*did you mean 'gumbel_temperature'"):
            TrainConfig.from_text("gumble_temperature = 0.3\n")

    def test_comments_and_blank_lines(self):
        cfg = TrainConfig.from_text("# header\n\nkl_weight = 0.5  # trailing\npointer = off\n")
        assert cfg.kl_weight == 0.5 and cfg.pointer is False

    @pytest.mark.parametrize("text", ["hidden = big", "pointer = maybe", "model = transformer",
                                      "gumbel_fraction = 1.5", "phases = 1:2", "no equals sign"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            TrainConfig.from_text(text)

    def test_phases(self):
        assert parse_phases("10:2:3, 4:5:6") == ((10, 2, 3), (4, 5, 6))
        assert TrainConfig.from_text("phases = desk").phases == DESK_PHASES

    def test_schedule(self):
        cfg = TrainConfig(phases=((10, 2, 3), (5, 4, 6)), coverage=True, coverage_steps=5, gumbel_fraction=0.1)
        assert cfg.total_steps == 20 and cfg.gumbel_start == 18
        assert cfg.phase_at(9) == (0, 2, 3, False) and cfg.phase_at(10) == (1, 4, 6, False)
        assert cfg.phase_at(15) == (2, 4, 6, True)

    def test_presets(self):
        assert preset("paper").vocab_max_size == 50000
        with pytest.raises(ConfigError):
            preset("papr")


class TestOverrides:
    def test_split(self):
        assert split_overrides(["--kl_weight=0", "--beam-width", "3"]) == {"kl_weight": "0", "beam_width": "3"}

    def test_missing_value(self):
        with pytest.raises(cli.UsageError):
            split_overrides(["--kl_weight"])


class TestBlobHash:
    def test_matches_git(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"hello\x00world\n")
        if shutil.which("git") is None:
            pytest.skip("git not installed")
        expected = subprocess.run(["git", "hash-object", str(path)], capture_output=True, text=True,
                                  check=True).stdout.strip()
        assert blob_hash(str(path)) == expected

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty"
        path.write_bytes(b"")
        assert blob_hash(str(path)) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


class TestCommands:
    def test_unknown_key_exit_code(self, tmp_path, capsys):
        code = main(["train", "--data", "x.tsv", "--out", str(tmp_path), "--gumble_temperature=0.3"])
        assert code == 1
        assert "did you mean 'gumbel_temperature'" in capsys.readouterr().err

    def test_missing_file_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.tsv")
        assert main(["train", "--data", missing, "--out", str(tmp_path)]) == 1
        assert missing in capsys.readouterr().err

    def test_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_format_error_is_runtime(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("no tab\n")
        assert main(["train", "--data", str(bad), "--out", str(tmp_path)]) == 2

    def test_override_supersedes_config_file_in_manifest(self, tmp_path, copy_run):
        _, corpus, _ = copy_run
        cfg = tmp_path / "run.cfg"
        cfg.write_text("kl_weight = 0.7\nmodel = acvi\nphases = 3:8:8\ncoverage = false\nhidden = 8\n")
        out = str(tmp_path / "o")
        assert main(["train", "--config", str(cfg), "--data", corpus, "--out", out, "--kl_weight=0"]) == 0
        manifest = read_manifest(out)
        assert manifest["config.kl_weight"] == "0.0" and manifest["config.model"] == "acvi"
        assert manifest["input.run.cfg"] == blob_hash(str(cfg))
        assert manifest[f"input.{os.path.basename(corpus)}"] == blob_hash(corpus)

    def test_synth_writes_corpus(self, tmp_path):
        assert main(["synth", "pointer", "--n", "5", "--out", str(tmp_path), "--seed", "2"]) == 0
        assert len((tmp_path / "corpus.tsv").read_text().splitlines()) == 5
        assert read_manifest(str(tmp_path))["seed"] == "2"

    def test_synth_features(self, tmp_path):
        assert main(["synth", "features", "--n", "3", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "features.txt").exists() and (tmp_path / "targets.txt").exists()

    def test_train_outputs(self, copy_run):
        _, _, out = copy_run
        for name in ("checkpoint.acvi", "loss_trace.txt", "loss_curve.png", "manifest.txt"):
            assert os.path.getsize(os.path.join(out, name)) > 0
        with open(os.path.join(out, "loss_trace.txt")) as fh:
            lines = fh.read().splitlines()
        assert len(lines) == 600 and lines[0].startswith("step=1 loss=")

    def test_decode_end_to_end(self, tmp_path, copy_run, capsys):
        _, _, out = copy_run
        src = tmp_path / "in.txt"
        src.write_text("a b c\nh a\n")
        assert main(["decode", os.path.join(out, "checkpoint.acvi"), "--input", str(src),
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "decoded.txt").read_text().splitlines() == ["a b c", "h a"]
        assert "a b c" in capsys.readouterr().out

    def test_eval_report(self, tmp_path, copy_run):
        _, corpus, out = copy_run
        assert main(["eval", os.path.join(out, "checkpoint.acvi"), "--data", corpus, "--out", str(tmp_path),
                     "--beam-width", "2"]) == 0
        report = parse_report((tmp_path / "report.txt").read_text())
        assert float(report["rouge1_f"]) > 0.9 and int(report["n_examples"]) == 400
        assert (tmp_path / "scores.png").exists() and (tmp_path / "attention.png").exists()

    def test_gradcheck_failure_exits_three(self, tmp_path, monkeypatch):
        from acvi import gradsuite

        def failing(suites, seed):
            real = gradsuite.run_case(gradsuite.REGISTRY["tanh"], seed)
            real.report.errors["x"] = 1.0
            return [real]

        monkeypatch.setattr(gradsuite, "run", failing)
        assert main(["gradcheck", "--scope", "ops", "--out", str(tmp_path)]) == 3
        assert "FAIL" in (tmp_path / "gradcheck.txt").read_text()
