import argparse
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from evsign.constants import DEFAULT_SEED, FUSION_MODES, MASK_MODES, PRECISIONS, PROTOCOLS
from evsign.errors import ConfigError


@dataclass
class EventConfig:
    n_segments: int = 48            # P
    n_bins: int = 5                 # B
    window_us: Optional[int] = None  # when set, P = ceil(duration / window_us) per clip


@dataclass
class SynthConfig:
    n_glosses: int = 12
    resolution: int = 32
    min_glosses: int = 2
    max_seq: int = 5
    gap_ms: int = 80
    contrast_threshold: float = 0.5
    dt_us: int = 2000
    n_clips: int = 380
    split_fractions: List[float] = field(default_factory=lambda: [300 / 380, 40 / 380, 40 / 380])
    function_word_prob: float = 0.4


@dataclass
class BackboneConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 64, 64])
    strides: List[int] = field(default_factory=lambda: [1, 2, 2, 2])
    kernel_size: int = 3
    threshold: float = 0.0          # a site is active when any bin exceeds this in magnitude


@dataclass
class TemporalConfig:
    dim: int = 64                   # C
    num_heads: int = 4
    window: int = 8                 # I
    gamma: int = 4
    sigma: float = 16.0
    mlp_ratio: int = 4
    fusion: str = "ltf"
    mask_mode: str = "soft"


@dataclass
class DecoderConfig:
    n_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 24


@dataclass
class TrainConfig:
    protocol: str = "s2g"
    lr0: float = 3e-5
    lr_min: float = 0.0
    weight_decay: float = 1e-3
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 40
    lambda_inter: float = 1.0
    lambda_final: float = 1.0
    lambda_ce: float = 1.0
    precision: str = "fp32"
    checked: bool = False


@dataclass
class PathConfig:
    corpus_dir: str = "data/corpus"
    output_dir: str = "runs/default"


@dataclass
class EvSignConfig:
    event: EventConfig = field(default_factory=EventConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    seed: int = DEFAULT_SEED


def default_config() -> DictConfig:
    return OmegaConf.structured(EvSignConfig)


def load_config(path=None, overrides: Sequence[str] = ()) -> DictConfig:
    """defaults -> JSON file -> ``a.b=v`` overrides -> sanity checks."""
    cfg = default_config()
    try:
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}")
            cfg = OmegaConf.merge(cfg, OmegaConf.create(loaded))
        if overrides:
            cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(list(overrides)))
    except OmegaConfBaseException as e:
        raise ConfigError(f"invalid configuration: {e}")
    return sanity_check_config(cfg)


def sanity_check_config(cfg: DictConfig) -> DictConfig:
    t, b, tr, s = cfg.temporal, cfg.backbone, cfg.train, cfg.synth
    checks = [
        (cfg.event.n_segments >= 1, f"event.n_segments must be >= 1, got {cfg.event.n_segments}"),
        (cfg.event.n_bins >= 1, f"event.n_bins must be >= 1, got {cfg.event.n_bins}"),
        (cfg.event.window_us is None or cfg.event.window_us > 0, "event.window_us must be positive"),
        (len(b.channels) == len(b.strides) and len(b.channels) >= 1,
         "backbone.channels and backbone.strides must have the same non-zero length"),
        (all(s_ >= 1 for s_ in b.strides), "backbone.strides must be >= 1"),
        (b.kernel_size % 2 == 1, f"backbone.kernel_size must be odd, got {b.kernel_size}"),
        (b.threshold >= 0, "backbone.threshold must be >= 0"),
        (b.channels[-1] == t.dim,
         f"final backbone channels ({b.channels[-1]}) must equal temporal.dim ({t.dim})"),
        (t.dim % 2 == 0, f"temporal.dim must be even for sinusoidal encodings, got {t.dim}"),
        (t.dim % t.num_heads == 0, f"temporal.dim ({t.dim}) must be divisible by num_heads ({t.num_heads})"),
        (t.dim % cfg.decoder.num_heads == 0,
         f"temporal.dim ({t.dim}) must be divisible by decoder.num_heads ({cfg.decoder.num_heads})"),
        (t.window >= 1, f"temporal.window must be >= 1, got {t.window}"),
        (t.gamma >= 1 and math.isqrt(t.gamma) ** 2 == t.gamma,
         f"temporal.gamma must be a perfect square, got {t.gamma}"),
        (t.sigma > 0, f"temporal.sigma must be positive, got {t.sigma}"),
        (t.fusion in FUSION_MODES, f"temporal.fusion must be one of {sorted(FUSION_MODES)}"),
        (t.mask_mode in MASK_MODES, f"temporal.mask_mode must be one of {sorted(MASK_MODES)}"),
        (cfg.decoder.n_blocks >= 1, "decoder.n_blocks must be >= 1"),
        (cfg.decoder.max_len >= 1, "decoder.max_len must be >= 1"),
        (tr.protocol in PROTOCOLS, f"train.protocol must be one of {sorted(PROTOCOLS)}"),
        (tr.lr0 > 0, f"train.lr0 must be positive, got {tr.lr0}"),
        (0 <= tr.lr_min <= tr.lr0, "train.lr_min must lie in [0, lr0]"),
        (tr.weight_decay >= 0, "train.weight_decay must be >= 0"),
        (len(tr.betas) == 2 and all(0 <= x < 1 for x in tr.betas), "train.betas must be two values in [0, 1)"),
        (min(tr.lambda_inter, tr.lambda_final, tr.lambda_ce) >= 0, "loss weights must be >= 0"),
        (tr.batch_size >= 1, "train.batch_size must be >= 1"),
        (tr.epochs >= 1, "train.epochs must be >= 1"),
        (tr.precision in PRECISIONS, f"train.precision must be one of {sorted(PRECISIONS)}"),
        (2 <= s.n_glosses, f"synth.n_glosses must be >= 2, got {s.n_glosses}"),
        (s.resolution >= 8, f"synth.resolution must be >= 8, got {s.resolution}"),
        (1 <= s.min_glosses <= s.max_seq, "synth.min_glosses must lie in [1, max_seq]"),
        (s.contrast_threshold > 0, "synth.contrast_threshold must be positive"),
        (s.n_clips > 0, "synth.n_clips must be positive"),
        (len(s.split_fractions) == 3 and abs(sum(s.split_fractions) - 1.0) <= 1e-6
         and all(f >= 0 for f in s.split_fractions), "synth.split_fractions must be 3 values summing to 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return cfg


ARCHITECTURE_SECTIONS = ("event", "backbone", "temporal", "decoder")


def config_hash(cfg: DictConfig, n_glosses: int, n_words: int) -> bytes:
    """SHA-256 over everything that changes parameter shapes or forward semantics."""
    payload = {name: OmegaConf.to_container(cfg[name], resolve=True) for name in ARCHITECTURE_SECTIONS}
    payload["protocol"] = cfg.train.protocol
    payload["vocab"] = [int(n_glosses), int(n_words)]
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).digest()


def add_config_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group(title="Configuration")
    group.add_argument("--config", type=str, default=None,
                       help="JSON config file merged over the built-in defaults (see configs/).")
    group.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Dotted-path override applied after --config, e.g. --set train.epochs=5. Repeatable.")
    group.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    return parser


def add_corpus_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group(title="Corpus")
    group.add_argument("--seed", type=int, default=None, help="Override the corpus/training seed.")
    group.add_argument("--out", type=str, default=None, help="Corpus directory (default: paths.corpus_dir).")
    return parser


def add_encode_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group(title="Encoding")
    group.add_argument("--input", type=str, required=True, help="Event file in evsign-events v1 format.")
    group.add_argument("--out", type=str, required=True, help="Output EVVG voxel file.")
    group.add_argument("--segments", type=int, default=None, help="Segment count P (default: event.n_segments).")
    group.add_argument("--bins", type=int, default=None, help="Bin count B (default: event.n_bins).")
    group.add_argument("--window-us", type=int, default=None,
                       help="Derive P from the clip duration with this window length instead.")
    return parser


def add_train_args(parser: argparse.ArgumentParser):
    group = parser.add_argument_group(title="Training")
    group.add_argument("--resume", type=str, default=None, help="Checkpoint to resume from.")
    group.add_argument("--output-dir", type=str, default=None, help="Run directory (default: paths.output_dir).")
    return parser


def add_evaluation_args(parser: argparse.ArgumentParser, require_checkpoint: bool = True):
    group = parser.add_argument_group(title="Evaluation")
    group.add_argument("--checkpoint", type=str, required=require_checkpoint, help="EVCK checkpoint file.")
    group.add_argument("--split", type=str, default="dev", choices=["train", "dev", "test"])
    group.add_argument("--output-dir", type=str, default=None, help="Where reports go (default: paths.output_dir).")
    group.add_argument("--limit", type=int, default=None, help="Only process the first N clips.")
    return parser


def overrides_from_args(args) -> List[str]:
    overrides = list(getattr(args, "overrides", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return overrides
