"""
Unit tests for evsign/cli.py.
Tests argument handling, exit codes and the light-weight commands.
"""

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from evsign.data_kits.event_io import read_voxel
from tests.fixtures.sample_data import EVENT_FILE_EQUAL_TIMES, EVENT_FILE_ZERO_POLARITY

SYNTH_SET = ["--set", "synth.n_glosses=3", "--set", "synth.resolution=12", "--set", "synth.n_clips=5",
             "--set", "synth.max_seq=2", "--set", "synth.min_glosses=1"]


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.mark.unit
class TestUsage:
    """Usage errors exit with 1; --help exits with 0."""

    @pytest.mark.parametrize("argv", [
        [],
        ["dance"],
        ["synth", "--bogus"],
        ["eval"],
        ["gradcheck", "--suite", "nope"],
        ["encode", "--input", "x.txt"],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_help(self):
        assert main(["--help"]) == EXIT_OK


@pytest.mark.unit
class TestRuntimeErrors:
    """Failures after argument parsing exit with 2."""

    def test_missing_corpus(self, temp_dir):
        argv = ["train", "--set", f"paths.corpus_dir={temp_dir / 'none'}", "--output-dir", str(temp_dir / "out")]
        assert main(argv) == EXIT_RUNTIME

    def test_invalid_config(self, temp_dir):
        assert main(["synth", "--set", "temporal.gamma=3", "--out", str(temp_dir)]) == EXIT_RUNTIME

    def test_missing_config_file(self, temp_dir):
        assert main(["synth", "--config", str(temp_dir / "nope.json")]) == EXIT_RUNTIME

    def test_malformed_event_file(self, temp_dir):
        src = temp_dir / "bad.txt"
        src.write_text(EVENT_FILE_ZERO_POLARITY)
        assert main(["encode", "--input", str(src), "--out", str(temp_dir / "o.evvg")]) == EXIT_RUNTIME

    def test_missing_checkpoint(self, tiny_cli_args, temp_dir):
        argv = ["eval", "--checkpoint", str(temp_dir / "none.evck")] + tiny_cli_args
        assert main(argv) == EXIT_RUNTIME


@pytest.mark.unit
class TestCommands:
    """Commands that run in well under a second."""

    def test_synth_is_reproducible(self, temp_dir, capsys):
        for name in ("a", "b"):
            assert main(["synth", *SYNTH_SET, "--seed", "4", "--out", str(temp_dir / name)]) == EXIT_OK
        summary = last_json(capsys)
        assert sum(summary["splits"].values()) == 5 and summary["glosses"] == 3
        files_a = sorted(p.relative_to(temp_dir / "a") for p in (temp_dir / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(temp_dir / "b") for p in (temp_dir / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (temp_dir / "a" / rel).read_bytes() == (temp_dir / "b" / rel).read_bytes()

    def test_encode(self, temp_dir, capsys):
        src = temp_dir / "clip.txt"
        src.write_text(EVENT_FILE_EQUAL_TIMES)
        out = temp_dir / "voxels" / "clip.evvg"
        assert main(["encode", "--input", str(src), "--out", str(out), "--segments", "2", "--bins", "3"]) == EXIT_OK
        grid = read_voxel(out.read_bytes())
        assert tuple(grid.data.shape) == (2, 3, 3, 4)
        assert grid.data.abs().sum().item() == pytest.approx(3.0)
        assert last_json(capsys)["events"] == 3

    def test_encode_window(self, temp_dir):
        src = temp_dir / "clip.txt"
        src.write_text(EVENT_FILE_EQUAL_TIMES)
        out = temp_dir / "clip.evvg"
        assert main(["encode", "--input", str(src), "--out", str(out), "--window-us", "20"]) == EXIT_OK
        # span 50..100 us in 20 us windows
        assert read_voxel(out.read_bytes()).data.shape[0] == 3

    def test_gradcheck_ctc(self, capsys):
        assert main(["gradcheck", "--suite", "ctc"]) == EXIT_OK
        line = capsys.readouterr().out.strip()
        assert line.startswith("ctc") and line.endswith("ok")

    def test_flops(self, tiny_cli_args, capsys):
        assert main(["flops", "--split", "train", "--limit", "3", *tiny_cli_args]) == EXIT_OK
        summary = last_json(capsys)
        assert summary["clips"] == 3
        assert 0.0 < summary["mean_ratio"] < 1.0
        assert summary["sparse_flops"] < summary["dense_equivalent_flops"]

    def test_baseline(self, tiny_cli_args, capsys):
        assert main(["baseline", "--split", "dev", *tiny_cli_args]) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["split"] == "dev" and report["n_clips"] >= 1
        assert report["wer"] >= 0.0 and report["bleu"] is None

    def test_baseline_rejects_even_width(self, tiny_cli_args):
        assert main(["baseline", "--width", "4", *tiny_cli_args]) == EXIT_RUNTIME
