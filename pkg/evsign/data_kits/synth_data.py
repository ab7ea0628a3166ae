"""
Deterministic "micro-sign" event corpus.

Each gloss is a stroke: a bright dot moving at constant speed through a few
waypoints. Pixels emit an event whenever their log intensity drifts more than
the contrast threshold away from the level at which they last fired. Clips are
gloss strokes laid end to end with silent gaps; every clip draws from its own
``default_rng([seed, clip_index])`` so parallel and serial generation agree.
"""
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from evsign.constants import BLANK_TOKEN, DEFAULT_SEED, MANIFEST_FORMAT, MANIFEST_NAME, SPLITS, WORD_SPECIALS
from evsign.data_kits.event_io import EventStream, parse_event_file, write_event_file
from evsign.errors import CorpusError
from evsign.helpers import ordered_map

DOT_RADIUS_PX = 1.5
BACKGROUND = 0.1
FOREGROUND = 1.0

WORD_BANK = (
    "apple", "river", "house", "green", "music", "winter", "bread", "friend",
    "school", "happy", "doctor", "train", "water", "mother", "garden", "window",
    "coffee", "yellow", "summer", "family", "letter", "market", "morning", "table",
    "paper", "forest", "bridge", "money", "island", "orange", "silver", "rabbit",
    "candle", "pencil", "travel", "guitar", "kitchen", "planet", "sister", "village",
    "cloud", "ticket", "button", "dinner", "hammer", "jacket", "ladder", "monkey",
)
FUNCTION_WORDS = ("the", "a", "my", "to", "is", "and")


@dataclass(frozen=True)
class GlossTemplate:
    gloss_id: int
    name: str
    waypoints: Tuple[Tuple[float, float], ...]
    duration_ms: int

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError(f"gloss {self.name} needs at least 2 waypoints")
        if any(not (0.0 <= c <= 1.0) for wp in self.waypoints for c in wp):
            raise ValueError(f"gloss {self.name} has waypoints outside the unit square")
        if self.duration_ms < 0:
            raise ValueError(f"gloss {self.name} has negative duration")

    @property
    def path_length(self) -> float:
        pts = np.asarray(self.waypoints)
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class ClipRecord:
    clip_id: str
    path: str
    glosses: List[int]
    words: List[int]

    def to_dict(self) -> dict:
        return {"id": self.clip_id, "path": self.path, "glosses": list(self.glosses), "words": list(self.words)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClipRecord":
        return cls(d["id"], d["path"], list(d["glosses"]), list(d["words"]))


@dataclass
class Corpus:
    root: Path
    splits: Dict[str, List[ClipRecord]]
    gloss_vocab: List[str]
    word_vocab: List[str]
    mapping: Dict[int, Tuple[str, ...]]
    seed: int
    resolution: int
    templates: List[GlossTemplate] = field(default_factory=list)

    def event_path(self, record: ClipRecord) -> Path:
        return self.root / record.path

    def read_events(self, record: ClipRecord) -> EventStream:
        return parse_event_file(self.event_path(record).read_bytes())

    def to_manifest(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "seed": self.seed,
            "resolution": self.resolution,
            "gloss_vocab": list(self.gloss_vocab),
            "word_vocab": list(self.word_vocab),
            "mapping": {str(g): list(words) for g, words in sorted(self.mapping.items())},
            "templates": [
                {"gloss_id": t.gloss_id, "name": t.name, "duration_ms": t.duration_ms,
                 "waypoints": [list(wp) for wp in t.waypoints]}
                for t in self.templates
            ],
            "splits": {name: [r.to_dict() for r in recs] for name, recs in self.splits.items()},
        }


# ============================ templates ============================

def make_gloss_vocab(n_glosses: int, seed: int) -> List[GlossTemplate]:
    if n_glosses < 2:
        raise ValueError(f"need at least 2 glosses, got {n_glosses}")
    rng = np.random.default_rng(seed)
    templates, seen = [], set()
    while len(templates) < n_glosses:
        n_points = int(rng.integers(3, 6))
        waypoints = tuple(tuple(round(float(c), 4) for c in wp) for wp in rng.uniform(0.1, 0.9, size=(n_points, 2)))
        duration = int(rng.integers(300, 501))
        gloss_id = len(templates) + 1
        candidate = GlossTemplate(gloss_id, f"G{gloss_id:02d}", waypoints, duration)
        # short strokes fire too few events to be told apart
        if waypoints in seen or candidate.path_length < 0.5:
            continue
        seen.add(waypoints)
        templates.append(candidate)
    return templates


def _path_positions(waypoints: Sequence[Tuple[float, float]], n: int) -> np.ndarray:
    pts = np.asarray(waypoints, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0.0:
        return np.repeat(pts[:1], n, axis=0)
    s = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])], axis=1)


def emit_events(template: GlossTemplate, resolution: int, contrast_threshold: float, dt_us: int) -> EventStream:
    if contrast_threshold <= 0:
        raise ValueError(f"contrast threshold must be positive, got {contrast_threshold}")
    if resolution < 8:
        raise ValueError(f"resolution must be at least 8, got {resolution}")
    if template.duration_ms <= 0:
        raise ValueError(f"gloss {template.name} has a zero-length trajectory duration")
    if dt_us < 1:
        raise ValueError(f"dt_us must be >= 1, got {dt_us}")

    duration_us = template.duration_ms * 1000
    n_steps = max(1, math.ceil(duration_us / dt_us))
    times = np.round(np.linspace(0, duration_us, n_steps + 1)).astype(np.int64)
    centers = _path_positions(template.waypoints, n_steps + 1) * resolution
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    px, py = xx + 0.5, yy + 0.5

    def log_intensity(c):
        inside = (px - c[0]) ** 2 + (py - c[1]) ** 2 <= DOT_RADIUS_PX ** 2
        return np.log(np.where(inside, FOREGROUND, BACKGROUND))

    ref = log_intensity(centers[0])
    chunks = []
    for i in range(1, n_steps + 1):
        level = log_intensity(centers[i])
        diff = level - ref
        counts = np.floor(np.abs(diff) / contrast_threshold + 1e-9).astype(np.int64)
        ys, xs = np.nonzero(counts)
        if len(ys) == 0:
            continue
        n = counts[ys, xs]
        pol = np.sign(diff[ys, xs]).astype(np.int64)
        ref[ys, xs] += pol * n * contrast_threshold
        step = times[i] - times[i - 1]
        rep = np.repeat(np.arange(len(ys)), n)
        j = np.concatenate([np.arange(1, k + 1) for k in n])
        t = times[i - 1] + (step * j) // n[rep]
        chunks.append(np.stack([t, xs[rep], ys[rep], pol[rep]], axis=1))

    if not chunks:
        return EventStream.empty(resolution, resolution, 0, duration_us)
    ev = np.concatenate(chunks)
    ev = ev[np.argsort(ev[:, 0], kind="stable")]
    return EventStream(ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3], resolution, resolution, 0, duration_us)


@functools.lru_cache(maxsize=512)
def _cached_events(template: GlossTemplate, resolution: int, contrast_threshold: float, dt_us: int) -> EventStream:
    return emit_events(template, resolution, contrast_threshold, dt_us)


@functools.lru_cache(maxsize=8)
def _default_templates(n_glosses: int, seed: int) -> Tuple[GlossTemplate, ...]:
    return tuple(make_gloss_vocab(n_glosses, seed))


def gloss_spans(gloss_ids: Sequence[int], gap_ms: int,
                templates: Sequence[GlossTemplate]) -> List[Tuple[int, int, int]]:
    """``(gloss_id, t_begin, t_end)`` in microseconds of each stroke of a composed clip.

    The last span ends where the clip ends.
    """
    lookup = {t.gloss_id: t for t in templates}
    spans, offset = [], 0
    for g in gloss_ids:
        if g not in lookup:
            raise ValueError(f"unknown gloss id(s): {[g]}")
        end = offset + lookup[g].duration_ms * 1000
        spans.append((int(g), offset, end))
        offset = end + gap_ms * 1000
    return spans


def compose_clip(gloss_ids: Sequence[int], gap_ms: int, config,
                 templates: Optional[Sequence[GlossTemplate]] = None,
                 seed: int = DEFAULT_SEED) -> Tuple[EventStream, List[int]]:
    """Lay gloss strokes end to end with ``gap_ms`` of silence between them.

    ``config`` supplies ``resolution``, ``contrast_threshold``, ``dt_us`` and ``max_seq``.
    Without ``templates`` the vocabulary is ``make_gloss_vocab(config.n_glosses, seed)``,
    the one ``generate_corpus`` uses for that seed.
    """
    if templates is None:
        templates = _default_templates(config.n_glosses, seed)
    gloss_ids = [int(g) for g in gloss_ids]
    if not gloss_ids:
        raise ValueError("a clip needs at least one gloss")
    if len(gloss_ids) > config.max_seq:
        raise ValueError(f"clip of {len(gloss_ids)} glosses exceeds max_seq={config.max_seq}")
    lookup = {t.gloss_id: t for t in templates}
    unknown = [g for g in gloss_ids if g not in lookup]
    if unknown:
        raise ValueError(f"unknown gloss id(s): {unknown}")

    parts, offset = [], 0
    for i, g in enumerate(gloss_ids):
        stream = _cached_events(lookup[g], config.resolution, float(config.contrast_threshold), config.dt_us)
        parts.append(stream.shifted(offset))
        offset += stream.duration
        if i < len(gloss_ids) - 1:
            offset += gap_ms * 1000
    return EventStream.concatenate(parts, 0, offset), gloss_ids


# ============================ annotations ============================

def build_word_mapping(templates: Sequence[GlossTemplate], seed: int,
                       function_word_prob: float = 0.4) -> Dict[int, Tuple[str, ...]]:
    """Injective gloss -> words map: one content word each, sometimes led by a function word."""
    if len(templates) > len(WORD_BANK):
        raise ValueError(f"at most {len(WORD_BANK)} glosses have distinct words")
    rng = np.random.default_rng([seed, 1])
    content = [WORD_BANK[i] for i in rng.permutation(len(WORD_BANK))[:len(templates)]]
    mapping = {}
    for t, word in zip(templates, content):
        if rng.random() < function_word_prob:
            mapping[t.gloss_id] = (FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))], word)
        else:
            mapping[t.gloss_id] = (word,)
    return mapping


def gloss_to_words(glosses: Sequence[int], mapping: Mapping[int, Sequence[str]]) -> List[str]:
    words = []
    for g in glosses:
        if g not in mapping:
            raise ValueError(f"gloss {g} has no word mapping")
        words.extend(mapping[g])
    return words


def _sample_glosses(rng: np.random.Generator, n_glosses: int, lo: int, hi: int) -> List[int]:
    z = int(rng.integers(lo, hi + 1))
    seq = []
    for _ in range(z):
        choices = [g for g in range(1, n_glosses + 1) if not seq or g != seq[-1]]
        seq.append(int(choices[int(rng.integers(len(choices)))]))
    return seq


def split_counts(n_clips: int, fractions: Sequence[float]) -> Dict[str, int]:
    if n_clips <= 0:
        raise ValueError(f"n_clips must be positive, got {n_clips}")
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be 3 non-negative values summing to 1, got {list(fractions)}")
    n_train = int(round(n_clips * fractions[0]))
    n_dev = int(round(n_clips * fractions[1]))
    n_dev = min(n_dev, n_clips - n_train)
    return {"train": n_train, "dev": n_dev, "test": n_clips - n_train - n_dev}


def generate_corpus(config, seed: int, out_dir, workers: Optional[int] = None) -> Corpus:
    """Write manifest, event files and annotation files under ``out_dir``."""
    counts = split_counts(config.n_clips, list(config.split_fractions))
    if not 1 <= config.min_glosses <= config.max_seq:
        raise ValueError(f"need 1 <= min_glosses <= max_seq, got {config.min_glosses}/{config.max_seq}")
    root = Path(out_dir)
    (root / "events").mkdir(parents=True, exist_ok=True)

    templates = make_gloss_vocab(config.n_glosses, seed)
    mapping = build_word_mapping(templates, seed, config.function_word_prob)
    gloss_vocab = [BLANK_TOKEN] + [t.name for t in templates]
    word_vocab = list(WORD_SPECIALS) + sorted({w for words in mapping.values() for w in words})
    word_index = {w: i for i, w in enumerate(word_vocab)}

    jobs, global_idx = [], 0
    for split in SPLITS:
        for idx in range(counts[split]):
            jobs.append((split, idx, global_idx))
            global_idx += 1

    def make_clip(job) -> Tuple[str, ClipRecord]:
        split, idx, gidx = job
        rng = np.random.default_rng([seed, gidx])
        glosses = _sample_glosses(rng, config.n_glosses, config.min_glosses, config.max_seq)
        stream, glosses = compose_clip(glosses, config.gap_ms, config, templates)
        rel = f"events/{split}_{idx:04d}.txt"
        (root / rel).write_bytes(write_event_file(stream))
        words = [word_index[w] for w in gloss_to_words(glosses, mapping)]
        return split, ClipRecord(f"{split}_{idx:04d}", rel, glosses, words)

    logger.info(f"Generating {len(jobs)} clips ({counts}) into {root}")
    results = ordered_map(make_clip, jobs, workers)
    splits = {s: [rec for split, rec in results if split == s] for s in SPLITS}

    corpus = Corpus(root, splits, gloss_vocab, word_vocab, mapping, seed, config.resolution, templates)
    for split, records in splits.items():
        (root / f"{split}.gloss").write_text(
            "".join(" ".join(gloss_vocab[g] for g in r.glosses) + "\n" for r in records), encoding="utf-8")
        (root / f"{split}.text").write_text(
            "".join(" ".join(word_vocab[w] for w in r.words) + "\n" for r in records), encoding="utf-8")
    (root / MANIFEST_NAME).write_text(json.dumps(corpus.to_manifest(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    logger.info(f"Corpus written: {sum(len(r) for r in splits.values())} clips, "
                f"{len(gloss_vocab) - 1} glosses, {len(word_vocab)} words")
    return corpus


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CorpusError(f"no corpus found at {root} (missing {MANIFEST_NAME}); run `evsign synth` first")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorpusError(f"corrupt manifest {manifest_path}: {e}")
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CorpusError(f"unsupported manifest format {manifest.get('format')!r}")
    templates = [
        GlossTemplate(t["gloss_id"], t["name"], tuple(tuple(wp) for wp in t["waypoints"]), t["duration_ms"])
        for t in manifest.get("templates", [])
    ]
    return Corpus(
        root=root,
        splits={name: [ClipRecord.from_dict(r) for r in recs] for name, recs in manifest["splits"].items()},
        gloss_vocab=list(manifest["gloss_vocab"]),
        word_vocab=list(manifest["word_vocab"]),
        mapping={int(g): tuple(words) for g, words in manifest["mapping"].items()},
        seed=int(manifest["seed"]),
        resolution=int(manifest["resolution"]),
        templates=templates,
    )
