"""
Global test configuration and fixtures for the evsign tests.
"""

import sys
import tempfile
from pathlib import Path

import pytest
import torch
from loguru import logger

sys.path.insert(0, str(Path(__file__).parent.parent))

from evsign.config import load_config
from evsign.data_kits.synth_data import generate_corpus

# Small enough to synthesize, encode and train in seconds on a CPU.
TINY_OVERRIDES = [
    "synth.n_glosses=4",
    "synth.resolution=16",
    "synth.n_clips=12",
    "synth.min_glosses=1",
    "synth.max_seq=3",
    "synth.gap_ms=40",
    "synth.dt_us=4000",
    "event.n_segments=16",
    "event.n_bins=2",
    "backbone.channels=[4,8]",
    "backbone.strides=[1,2]",
    "temporal.dim=8",
    "temporal.num_heads=2",
    "temporal.window=4",
    "temporal.sigma=4.0",
    "temporal.mlp_ratio=2",
    "decoder.n_blocks=1",
    "decoder.num_heads=2",
    "decoder.max_len=6",
    "train.lr0=0.001",
    "train.epochs=2",
]


def make_tiny_config(corpus_dir, output_dir, extra=()):
    overrides = TINY_OVERRIDES + [f"paths.corpus_dir={corpus_dir}", f"paths.output_dir={output_dir}"]
    return load_config(None, overrides + list(extra))


@pytest.fixture(scope="session", autouse=True)
def setup_test_environment():
    """Quiet logging; leave warnings and errors visible."""
    logger.remove()
    logger.add(sys.stderr, level="WARNING")
    torch.set_num_threads(1)
    yield


@pytest.fixture
def temp_dir():
    """Create temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


@pytest.fixture
def generator():
    """Seeded torch generator."""
    return torch.Generator().manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """A 12-clip, 4-gloss corpus generated once per session."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = make_tiny_config(root, root / "unused")
    generate_corpus(cfg.synth, cfg.seed, root, workers=1)
    return root


@pytest.fixture
def tiny_config(tiny_corpus_dir, temp_dir):
    """Tiny S2G configuration pointing at the session corpus."""
    return make_tiny_config(tiny_corpus_dir, temp_dir / "run")


@pytest.fixture
def tiny_s2gt_config(tiny_corpus_dir, temp_dir):
    return make_tiny_config(tiny_corpus_dir, temp_dir / "run", ["train.protocol=s2gt"])


@pytest.fixture
def tiny_cli_args(tiny_corpus_dir, temp_dir):
    """The tiny configuration as repeated ``--set`` flags for ``evsign.cli.main``."""
    args = []
    for item in TINY_OVERRIDES + [f"paths.corpus_dir={tiny_corpus_dir}", f"paths.output_dir={temp_dir / 'run'}"]:
        args += ["--set", item]
    return args


@pytest.fixture
def make_config(tiny_corpus_dir, temp_dir):
    """Factory for tiny configurations with extra ``a.b=v`` overrides."""
    def make(*extra, output_dir=None):
        return make_tiny_config(tiny_corpus_dir, output_dir or temp_dir / "run", extra)
    return make
