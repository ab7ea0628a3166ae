"""
Frame-majority reference recognizer.

Each training segment is labelled with the gloss whose stroke covers its
midpoint (blank in the gaps). A dev segment takes the label of its nearest
training segment under cosine similarity of blurred per-bin event maps, labels
are smoothed with a sliding majority vote, and runs collapse into a gloss
sequence. Nothing is learned by gradient descent, so its WER bounds how hard
the corpus is before any model is trained on it.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from tqdm import tqdm

from evsign.constants import BLANK_ID
from evsign.data_kits.event_io import encode_clip, segments_for_window
from evsign.data_kits.synth_data import ClipRecord, Corpus, GlossTemplate, gloss_spans
from evsign.helpers import ordered_map
from evsign.metrics import ClipScore, ScoreReport, aggregate


def segment_labels(glosses: Sequence[int], gap_ms: int, templates: Sequence[GlossTemplate], P: int) -> np.ndarray:
    """Gloss id at the midpoint of each of the ``P`` segments of a composed clip, 0 in gaps."""
    spans = gloss_spans(glosses, gap_ms, templates)
    span = spans[-1][2]
    k = np.arange(P)
    mid = ((k * span) // P + ((k + 1) * span) // P) / 2.0
    labels = np.full(P, BLANK_ID, dtype=np.int64)
    for g, begin, end in spans:
        labels[(mid >= begin) & (mid < end)] = g
    return labels


def segment_features(voxels: torch.Tensor, blur: int = 3, stride: int = 2) -> Tuple[torch.Tensor, torch.Tensor]:
    """``(P, B, H, W)`` voxels -> L2-normalized per-segment descriptors and an activity flag.

    The descriptor is the blurred, subsampled event magnitude of every bin, so it
    keeps where the stroke is and which way it moves within the segment.
    """
    counts = voxels.abs().to(torch.float32)
    if blur > 1 or stride > 1:
        counts = F.avg_pool2d(counts, blur, stride=stride, padding=blur // 2, count_include_pad=False)
    flat = counts.flatten(1)
    active = flat.sum(dim=1) > 0
    return F.normalize(flat, dim=1), active


def majority_filter(labels: np.ndarray, width: int = 5) -> np.ndarray:
    """Most frequent label in a centred window; a tie keeps the centre label when it is among the winners."""
    if width < 1 or width % 2 == 0:
        raise ValueError(f"majority filter width must be odd and positive, got {width}")
    half = width // 2
    out = np.empty_like(labels)
    for i in range(len(labels)):
        window = labels[max(0, i - half): i + half + 1]
        counts = np.bincount(window)
        best = counts.max()
        out[i] = labels[i] if counts[labels[i]] == best else int(np.argmax(counts))
    return out


def collapse_labels(labels: Sequence[int]) -> List[int]:
    out, prev = [], None
    for k in labels:
        k = int(k)
        if k != prev and k != BLANK_ID:
            out.append(k)
        prev = k
    return out


@dataclass
class FrameMajorityBaseline:
    """1-nearest-neighbour segment classifier plus majority smoothing."""
    width: int = 5
    blur: int = 3
    chunk: int = 512

    def __post_init__(self):
        if self.width < 1 or self.width % 2 == 0:
            raise ValueError(f"majority filter width must be odd and positive, got {self.width}")

    def fit(self, clips: Sequence[torch.Tensor], labels: Sequence[np.ndarray]) -> "FrameMajorityBaseline":
        """Fit on ``(P, B, H, W)`` voxel grids with per-segment labels."""
        return self.fit_features([segment_features(v, self.blur) for v in clips], labels)

    def fit_features(self, features: Sequence[Tuple[torch.Tensor, torch.Tensor]],
                     labels: Sequence[np.ndarray]) -> "FrameMajorityBaseline":
        feats = [f[active] for f, active in features]
        labs = [torch.as_tensor(lab)[active] for (_, active), lab in zip(features, labels)]
        if not feats or sum(f.shape[0] for f in feats) == 0:
            raise ValueError("no active training segment to compare against")
        self.bank = torch.cat(feats)
        self.bank_labels = torch.cat(labs)
        logger.info(f"Frame-majority bank: {self.bank.shape[0]} active segments")
        return self

    def segment_predictions(self, voxels: torch.Tensor) -> np.ndarray:
        return self.feature_predictions(*segment_features(voxels, self.blur))

    def feature_predictions(self, feats: torch.Tensor, active: torch.Tensor) -> np.ndarray:
        out = torch.full((feats.shape[0],), BLANK_ID, dtype=torch.long)
        idx = torch.nonzero(active).flatten()
        for start in range(0, len(idx), self.chunk):
            rows = idx[start:start + self.chunk]
            nearest = (feats[rows] @ self.bank.T).argmax(dim=1)
            out[rows] = self.bank_labels[nearest]
        return out.numpy()

    def predict(self, voxels: torch.Tensor) -> List[int]:
        return collapse_labels(majority_filter(self.segment_predictions(voxels), self.width))


def _encode_features(corpus: Corpus, record: ClipRecord, event_cfg, blur: int) -> Tuple[torch.Tensor, torch.Tensor]:
    stream = corpus.read_events(record)
    P = event_cfg.n_segments if event_cfg.window_us is None else segments_for_window(stream, event_cfg.window_us)
    return segment_features(encode_clip(stream, P, event_cfg.n_bins).data, blur)


def frame_majority_report(cfg, corpus: Corpus, split: str = "dev", limit: Optional[int] = None,
                          width: int = 5, blur: int = 3, progress: bool = False) -> ScoreReport:
    """Fit on the train split and score ``split``; ``cfg.synth.gap_ms`` must be the one the corpus was made with."""
    if not corpus.templates:
        raise ValueError("corpus manifest carries no gloss templates; regenerate it with `evsign synth`")
    if not corpus.splits.get("train") or not corpus.splits.get(split):
        raise ValueError(f"need a non-empty train split and {split!r} split")
    baseline = FrameMajorityBaseline(width=width, blur=blur)
    encode = lambda r: _encode_features(corpus, r, cfg.event, blur)

    train_records = corpus.splits["train"]
    train_features = ordered_map(encode, train_records)
    train_labels = [segment_labels(r.glosses, cfg.synth.gap_ms, corpus.templates, f.shape[0])
                    for r, (f, _) in zip(train_records, train_features)]
    baseline.fit_features(train_features, train_labels)

    records = list(corpus.splits[split])[:limit]
    rows = []
    for record, features in tqdm(zip(records, ordered_map(encode, records)), total=len(records),
                                 desc=f"baseline {split}", disable=not progress, leave=False):
        hyp = collapse_labels(majority_filter(baseline.feature_predictions(*features), width))
        rows.append(ClipScore(record.clip_id,
                              gloss_ref=[corpus.gloss_vocab[g] for g in record.glosses],
                              gloss_hyp=[corpus.gloss_vocab[g] for g in hyp]))
    report = aggregate(rows, split)
    logger.info(f"Frame-majority baseline on {split}: WER {report.wer:.4f} over {report.n_clips} clips")
    return report
