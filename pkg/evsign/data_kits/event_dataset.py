import threading
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
from loguru import logger
from torch.utils.data import Dataset

from evsign.data_kits.event_io import encode_clip, segments_for_window
from evsign.data_kits.synth_data import ClipRecord, Corpus
from evsign.helpers import ordered_map
from evsign.modules.sparse_conv import SparseTensor, sparsify


@dataclass
class ClipSample:
    index: int
    clip_id: str
    sparse: SparseTensor
    glosses: List[int]
    words: List[int]


class EventClipDataset(Dataset):
    """
    One split of a generated corpus, encoded to voxel grids and sparsified per segment.

    Encoded clips are cached, so rulebooks built on a clip's sparse tensor are
    reused across epochs.
    """

    def __init__(
        self,
        corpus: Corpus,
        split: str,
        n_segments: int,
        n_bins: int,
        window_us: Optional[int] = None,
        threshold: float = 0.0,
        limit: Optional[int] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if split not in corpus.splits:
            raise ValueError(f"corpus has no split {split!r}")
        self.corpus = corpus
        self.split = split
        self.n_segments = n_segments
        self.n_bins = n_bins
        self.window_us = window_us
        self.threshold = threshold
        self.dtype = dtype
        self.records: List[ClipRecord] = list(corpus.splits[split])[:limit]
        self._cache: Dict[int, ClipSample] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def encode(self, idx: int) -> ClipSample:
        record = self.records[idx]
        stream = self.corpus.read_events(record)
        P = self.n_segments if self.window_us is None else segments_for_window(stream, self.window_us)
        grid = encode_clip(stream, P, self.n_bins)
        sparse = sparsify(grid.data.to(self.dtype), self.threshold)
        return ClipSample(idx, record.clip_id, sparse, list(record.glosses), list(record.words))

    def __getitem__(self, idx):
        sample = self._cache.get(idx)
        if sample is None:
            sample = self.encode(idx)
            with self._lock:
                self._cache.setdefault(idx, sample)
        return sample

    def prefetch(self, workers: Optional[int] = None):
        missing = [i for i in range(len(self)) if i not in self._cache]
        if not missing:
            return self
        logger.info(f"Encoding {len(missing)} {self.split} clips")
        for idx, sample in zip(missing, ordered_map(self.encode, missing, workers)):
            self._cache[idx] = sample
        return self


def collate_clips(batch: List[ClipSample]) -> List[ClipSample]:
    """Clips stay separate; each one gets its own graph."""
    return sorted(batch, key=lambda s: s.index)
