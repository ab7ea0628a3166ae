from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import torch
from loguru import logger
from tqdm import tqdm

from evsign.config import config_hash
from evsign.constants import PRECISION_TO_TYPE
from evsign.data_kits.event_dataset import ClipSample
from evsign.data_kits.synth_data import Corpus
from evsign.metrics import ClipScore, ScoreReport, aggregate
from evsign.modules import load_model
from evsign.modules.heads import GlossVocab, WordVocab, ctc_greedy_decode
from evsign.training.checkpoint import Checkpoint, load_checkpoint, restore_model


@dataclass
class Prediction:
    clip_id: str
    glosses: List[int]
    words: Optional[List[int]]
    mask: Optional[torch.Tensor]     # (L, P)
    log_probs: torch.Tensor          # (L, Y)


class Recognizer(object):
    """Greedy gloss recognition (and translation when the model has a decoder) over encoded clips."""

    def __init__(self, cfg, model, gloss_vocab: GlossVocab, word_vocab: WordVocab, checkpoint: Checkpoint = None):
        self.cfg = cfg
        self.model = model
        self.gloss_vocab = gloss_vocab
        self.word_vocab = word_vocab
        self.checkpoint = checkpoint

    @classmethod
    def from_checkpoint(cls, cfg, checkpoint_path, corpus: Corpus):
        """
        Build the model from ``cfg`` and load ``checkpoint_path`` into it.

        Args:
            cfg: validated configuration; must describe the architecture the checkpoint was trained with.
            checkpoint_path (str or pathlib.Path): EVCK file.
            corpus (Corpus): supplies the vocabularies the config hash was computed over.
        """
        gloss_vocab, word_vocab = GlossVocab(corpus.gloss_vocab), WordVocab(corpus.word_vocab)
        expected = config_hash(cfg, len(gloss_vocab), len(word_vocab))
        ckpt = load_checkpoint(checkpoint_path, expected_hash=expected)
        logger.info(f"Loaded checkpoint {checkpoint_path} (epoch {ckpt.epoch})")
        factor_kwargs = {'dtype': PRECISION_TO_TYPE[cfg.train.precision]}
        model = load_model(cfg, len(gloss_vocab), len(word_vocab), factor_kwargs)
        restore_model(model, ckpt.params)
        model.eval()
        return cls(cfg, model, gloss_vocab, word_vocab, ckpt)

    @torch.no_grad()
    def predict(self, sample: ClipSample) -> Prediction:
        self.model.eval()
        enc = self.model.encode(sample.sparse)
        glosses = ctc_greedy_decode(enc.log_probs)
        words = None
        if self.model.decoder is not None:
            words = self.model.decoder.generate(enc.memory, self.cfg.decoder.max_len)
        mask = enc.mask[0] if enc.mask is not None else None
        return Prediction(sample.clip_id, glosses, words, mask, enc.log_probs)

    def score_clip(self, sample: ClipSample, pred: Prediction) -> ClipScore:
        row = ClipScore(sample.clip_id,
                        gloss_ref=self.gloss_vocab.decode(sample.glosses),
                        gloss_hyp=self.gloss_vocab.decode(pred.glosses))
        if pred.words is not None:
            row.text_ref = self.word_vocab.decode(sample.words)
            row.text_hyp = self.word_vocab.decode(pred.words)
        return row

    def score(self, samples: Iterable[ClipSample], split: str = "dev",
              progress: bool = False) -> Tuple[ScoreReport, List[ClipScore]]:
        rows = []
        for sample in tqdm(samples, desc=f"eval {split}", disable=not progress, leave=False):
            rows.append(self.score_clip(sample, self.predict(sample)))
        return aggregate(rows, split), rows
