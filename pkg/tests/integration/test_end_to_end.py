"""
Integration tests for the synth -> encode -> train -> eval pipeline on the tiny corpus.
"""

import json
import math
import sys
from pathlib import Path

import pytest
import torch

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign import tensor_core as tc
from evsign.cli import EXIT_OK, main
from evsign.data_kits.event_io import read_voxel
from evsign.training.checkpoint import load_checkpoint
from evsign.training.trainer import BEST_NAME, LAST_NAME, REPORT_NAME, Trainer, evaluate, forward_s2gt, train


def read_report(run_dir):
    return [json.loads(line) for line in (run_dir / REPORT_NAME).read_text().splitlines()]


def first_feasible(trainer):
    for i in range(len(trainer.train_set)):
        sample = trainer.train_set[i]
        if trainer.forward(sample).feasible:
            return sample
    pytest.skip("no feasible clip in the tiny corpus")


@pytest.mark.integration
@pytest.mark.slow
class TestTraining:
    """Training runs are reproducible and resumable."""

    def test_run_writes_report_and_checkpoints(self, tiny_config, temp_dir):
        trainer = train(tiny_config, output_dir=temp_dir / "a", progress=False)
        records = read_report(temp_dir / "a")
        assert [r["epoch"] for r in records] == [1, 2]
        assert set(records[0]) == {"epoch", "lr", "train_loss", "dev_wer"}
        assert records[0]["lr"] == tiny_config.train.lr0
        assert (temp_dir / "a" / LAST_NAME).is_file() and (temp_dir / "a" / BEST_NAME).is_file()
        last = load_checkpoint(temp_dir / "a" / LAST_NAME, trainer.config_hash)
        assert last.epoch == 2
        assert last.metadata["best_dev_wer"] == min(r["dev_wer"] for r in records)
        steps_per_epoch = math.ceil(len(trainer.train_set) / tiny_config.train.batch_size)
        assert len(trainer.step_losses) == 2 * steps_per_epoch

    def test_two_runs_are_identical(self, tiny_config, temp_dir):
        a = train(tiny_config, output_dir=temp_dir / "a", progress=False)
        b = train(tiny_config, output_dir=temp_dir / "b", progress=False)
        assert (temp_dir / "a" / REPORT_NAME).read_text() == (temp_dir / "b" / REPORT_NAME).read_text()
        for (name, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
            assert torch.equal(p, q), name

    def test_resume_matches_uninterrupted_run(self, tiny_config, temp_dir):
        full = train(tiny_config, output_dir=temp_dir / "full", progress=False)

        interrupted = Trainer(tiny_config, output_dir=temp_dir / "resumed", progress=False)
        interrupted.fit(until_epoch=1)
        assert [r["epoch"] for r in read_report(temp_dir / "resumed")] == [1]

        resumed = train(tiny_config, resume=temp_dir / "resumed" / LAST_NAME,
                        output_dir=temp_dir / "resumed", progress=False)
        assert (temp_dir / "full" / REPORT_NAME).read_text() == (temp_dir / "resumed" / REPORT_NAME).read_text()
        for (name, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
            assert torch.equal(p, q), name
        assert resumed.best_wer == full.best_wer

    def test_best_checkpoint_reproduces_dev_wer(self, tiny_config, temp_dir):
        train(tiny_config, output_dir=temp_dir / "run", progress=False)
        best = min(r["dev_wer"] for r in read_report(temp_dir / "run"))
        report = evaluate(tiny_config, temp_dir / "run" / BEST_NAME, "dev", temp_dir / "eval", progress=False)
        assert report.wer == best
        assert (temp_dir / "eval" / "dev.report.json").is_file()
        hyps = (temp_dir / "eval" / "dev.hyps.jsonl").read_text().splitlines()
        assert len(hyps) == report.n_clips

    def test_s2gt_run_logs_bleu(self, tiny_s2gt_config, temp_dir):
        train(tiny_s2gt_config, output_dir=temp_dir / "slt", progress=False)
        records = read_report(temp_dir / "slt")
        assert all(0.0 <= r["dev_bleu1"] <= 100.0 for r in records)
        report = evaluate(tiny_s2gt_config, temp_dir / "slt" / LAST_NAME, "test", temp_dir / "slt",
                          progress=False)
        assert report.bleu is not None and len(report.bleu) == 4 and report.rouge_l is not None

    def test_checked_mode_run(self, make_config, temp_dir):
        cfg = make_config("train.checked=true", "train.epochs=1")
        train(cfg, progress=False)
        assert len(read_report(temp_dir / "run")) == 1


@pytest.mark.integration
class TestLossWiring:
    """Gradients reach the parts each loss term is supposed to train."""

    def test_s2gt_gradient_reaches_backbone(self, tiny_s2gt_config, temp_dir):
        trainer = Trainer(tiny_s2gt_config, output_dir=temp_dir, progress=False)
        out = forward_s2gt(trainer.model, first_feasible(trainer), tiny_s2gt_config.train)
        grads = tc.backward(out.loss, trainer.params)
        assert torch.count_nonzero(grads["backbone.stage0.conv0.weight"]) > 0
        assert torch.count_nonzero(grads["decoder.proj.weight"]) > 0

    def test_zero_lambda_inter_leaves_inter_head_untouched(self, make_config):
        cfg = make_config("train.lambda_inter=0")
        trainer = Trainer(cfg, progress=False)
        grads = tc.backward(trainer.forward(first_feasible(trainer)).loss, trainer.params)
        assert torch.count_nonzero(grads["inter_head.fc.weight"]) == 0
        assert torch.count_nonzero(grads["head.fc.weight"]) > 0

    def test_translation_only_objective(self, make_config):
        cfg = make_config("train.protocol=s2gt", "train.lambda_inter=0", "train.lambda_final=0")
        trainer = Trainer(cfg, progress=False)
        sample = trainer.train_set[0]
        out = trainer.forward(sample)
        assert torch.isfinite(out.loss)
        grads = tc.backward(out.loss, trainer.params)
        assert torch.count_nonzero(grads["head.fc.weight"]) == 0
        assert torch.count_nonzero(grads["backbone.stage0.conv0.weight"]) > 0

    def test_infeasible_clips_are_skipped(self, make_config):
        # 4 segments fuse into a single token, too short for any multi-gloss target
        cfg = make_config("event.n_segments=4")
        trainer = Trainer(cfg, progress=False)
        long_clips = [trainer.train_set[i] for i in range(len(trainer.train_set))
                      if len(trainer.train_set[i].glosses) > 1]
        if not long_clips:
            pytest.skip("tiny corpus has no multi-gloss clip")
        before = {n: p.detach().clone() for n, p in trainer.params.items()}
        assert trainer.train_step(long_clips[:1], lr=1e-3) == []
        for name, p in trainer.params.items():
            assert torch.equal(p, before[name]), name


@pytest.mark.integration
@pytest.mark.slow
class TestCommandLine:
    """The full pipeline through evsign.cli.main."""

    def test_train_eval_mask_dump(self, tiny_cli_args, temp_dir, capsys):
        assert main(["train", *tiny_cli_args]) == EXIT_OK
        run = temp_dir / "run"
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["epochs"] == 2

        assert main(["eval", "--checkpoint", str(run / BEST_NAME), "--split", "test", *tiny_cli_args]) == EXIT_OK
        assert json.loads((run / "test.report.json").read_text())["split"] == "test"

        assert main(["mask-dump", "--checkpoint", str(run / BEST_NAME), *tiny_cli_args]) == EXIT_OK
        masks = sorted((run / "masks" / "dev").glob("*.evvg"))
        assert masks
        grid = read_voxel(masks[0].read_bytes())
        # 16 segments fuse into 4 tokens
        assert tuple(grid.data.shape) == (1, 1, 4, 16)
        assert (grid.data >= 0).all() and (grid.data <= 1).all()

    def test_mask_dump_needs_a_mask(self, tiny_cli_args, temp_dir):
        argv = ["mask-dump", "--checkpoint", str(temp_dir / "x.evck"), *tiny_cli_args,
                "--set", "temporal.mask_mode=off"]
        assert main(argv) == 2


@pytest.mark.integration
@pytest.mark.slow
class TestLossWeights:
    """Runs across the loss-weight grid stay finite."""

    @pytest.mark.parametrize("inter,final,ce", [
        (1, 1, 1), (5, 5, 5), (10, 10, 10), (1, 5, 10), (10, 1, 5), (5, 10, 1),
    ])
    def test_weight_grid_trains(self, make_config, temp_dir, inter, final, ce):
        cfg = make_config("train.protocol=s2gt", f"train.lambda_inter={inter}", f"train.lambda_final={final}",
                          f"train.lambda_ce={ce}")
        trainer = train(cfg, progress=False)
        records = read_report(temp_dir / "run")
        assert len(records) == 2
        assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["dev_wer"]) for r in records)
        assert trainer.step_losses and all(math.isfinite(x) for x in trainer.step_losses)
