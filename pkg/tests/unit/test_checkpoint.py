"""
Unit tests for evsign/training/checkpoint.py.
Tests the EVCK container and restoring models from it.
"""

import struct
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign.config import config_hash, load_config
from evsign.errors import CheckpointError
from evsign.modules import load_model
from evsign.modules.sparse_conv import sparsify
from evsign.training.checkpoint import (
    Checkpoint, load_checkpoint, model_state, read_checkpoint, restore_model, save_checkpoint, write_checkpoint,
)

SMALL = ["event.n_bins=2", "backbone.channels=[4,8]", "backbone.strides=[1,2]", "temporal.dim=8",
         "temporal.num_heads=2", "temporal.window=4", "decoder.num_heads=2", "decoder.n_blocks=1"]


@pytest.fixture
def small_cfg():
    return load_config(None, SMALL)


@pytest.fixture
def sample_checkpoint(generator):
    return Checkpoint(
        config_hash=bytes(range(32)),
        epoch=3,
        params={"w": torch.randn(2, 3, generator=generator), "s": torch.tensor(1.5)},
        optimizer={"w.exp_avg": torch.zeros(2, 3), "w.step": torch.tensor(3.0)},
        metadata={"best_dev_wer": 0.5, "history": [{"epoch": 1}]},
    )


@pytest.mark.unit
class TestContainer:
    """Tests for write_checkpoint and read_checkpoint."""

    def test_round_trip(self, sample_checkpoint):
        back = read_checkpoint(write_checkpoint(sample_checkpoint))
        assert back.config_hash == sample_checkpoint.config_hash and back.epoch == 3
        assert list(back.params) == ["w", "s"]
        assert torch.equal(back.params["w"], sample_checkpoint.params["w"])
        assert back.params["s"].shape == () and back.params["s"].item() == 1.5
        assert back.optimizer["w.step"].item() == 3.0
        assert back.metadata == sample_checkpoint.metadata

    def test_header_layout(self, sample_checkpoint):
        data = write_checkpoint(sample_checkpoint)
        magic, version, digest, epoch = struct.unpack_from("<4sH32sI", data)
        assert (magic, version, digest, epoch) == (b"EVCK", 1, bytes(range(32)), 3)

    def test_bad_magic(self, sample_checkpoint):
        data = b"EVCX" + write_checkpoint(sample_checkpoint)[4:]
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(data)

    def test_bad_version(self, sample_checkpoint):
        data = bytearray(write_checkpoint(sample_checkpoint))
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(bytes(data))

    def test_truncated(self, sample_checkpoint):
        data = write_checkpoint(sample_checkpoint)
        for cut in (0, 10, 45, 60, len(data) - 1):
            with pytest.raises(CheckpointError, match="truncated"):
                read_checkpoint(data[:cut])

    def test_trailing_bytes(self, sample_checkpoint):
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(write_checkpoint(sample_checkpoint) + b"\0\0")

    def test_invalid_metadata(self, sample_checkpoint):
        data = write_checkpoint(Checkpoint(bytes(32), 0, {}, {}, {"k": 1}))
        with pytest.raises(CheckpointError, match="JSON"):
            read_checkpoint(data[:-1] + b"!")

    def test_hash_length(self):
        with pytest.raises(CheckpointError):
            write_checkpoint(Checkpoint(b"short", 0, {}))


@pytest.mark.unit
class TestFiles:
    """Tests for save_checkpoint and load_checkpoint."""

    def test_save_is_atomic(self, sample_checkpoint, temp_dir):
        path = save_checkpoint(sample_checkpoint, temp_dir / "nested" / "last.evck")
        assert path.is_file()
        assert not list(path.parent.glob("*.tmp"))
        assert load_checkpoint(path).epoch == 3

    def test_missing_file(self, temp_dir):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(temp_dir / "nope.evck")

    def test_hash_mismatch(self, sample_checkpoint, temp_dir):
        path = save_checkpoint(sample_checkpoint, temp_dir / "a.evck")
        assert load_checkpoint(path, expected_hash=bytes(range(32))).epoch == 3
        with pytest.raises(CheckpointError, match="different architecture"):
            load_checkpoint(path, expected_hash=bytes(32))


@pytest.mark.unit
class TestRestoreModel:
    """Restoring a model reproduces its outputs bit for bit."""

    def test_outputs_identical_after_restore(self, small_cfg, generator, temp_dir):
        torch.manual_seed(1)
        model = load_model(small_cfg, 5, 9).eval()
        digest = config_hash(small_cfg, 5, 9)
        path = save_checkpoint(Checkpoint(digest, 1, model_state(model)), temp_dir / "m.evck")

        torch.manual_seed(2)
        other = load_model(small_cfg, 5, 9).eval()
        restore_model(other, load_checkpoint(path, digest).params)

        voxels = torch.randn(8, 2, 12, 12, generator=generator)
        voxels[voxels.abs() < 1.0] = 0
        x = sparsify(voxels)
        with torch.no_grad():
            a, b = model(x), other(x)
        assert torch.equal(a.log_probs, b.log_probs)
        assert torch.equal(a.inter_log_probs, b.inter_log_probs)

    def test_mismatched_state(self, small_cfg):
        model = load_model(small_cfg, 5, 9)
        state = model_state(model)
        with pytest.raises(CheckpointError, match="missing"):
            restore_model(model, {k: v for k, v in state.items() if k != "head.fc.bias"})
        bad = dict(state)
        bad["head.fc.bias"] = torch.zeros(7)
        with pytest.raises(CheckpointError, match="shape"):
            restore_model(model, bad)

    def test_vocab_changes_hash(self, small_cfg):
        assert config_hash(small_cfg, 5, 9) != config_hash(small_cfg, 6, 9)
