"""
S2G / S2GT training and split evaluation.

Every clip in a batch gets its own graph; per-clip gradients are summed in clip
index order and divided by the batch size before one Adam step. Batch order per
epoch is a permutation seeded by (seed, epoch), so a resumed run follows the
same trajectory as an uninterrupted one.
"""
import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import torch
from loguru import logger
from omegaconf import OmegaConf
from torch.utils.data import DataLoader
from tqdm import tqdm

from evsign import tensor_core as tc
from evsign.config import config_hash
from evsign.constants import BOS_ID, EOS_ID, PRECISION_TO_TYPE
from evsign.data_kits.event_dataset import ClipSample, EventClipDataset, collate_clips
from evsign.data_kits.synth_data import Corpus, load_corpus
from evsign.errors import CheckpointError, CorpusError
from evsign.helpers import set_reproducible
from evsign.inference import Recognizer
from evsign.metrics import ScoreReport
from evsign.modules import load_model
from evsign.modules.heads import GlossVocab, WordVocab, cross_entropy, ctc_loss
from evsign.modules.models_evsign import EncoderOutput
from evsign.training.checkpoint import Checkpoint, load_checkpoint, model_state, restore_model, save_checkpoint
from evsign.training.optim import Adam, cosine_lr

REPORT_NAME = "train_report.jsonl"
LAST_NAME = "last.evck"
BEST_NAME = "best.evck"


@dataclass
class S2GOutput:
    l_inter: torch.Tensor
    l_final: torch.Tensor
    l_slr: torch.Tensor
    log_probs: torch.Tensor
    feasible: bool
    encoded: EncoderOutput

    @property
    def loss(self) -> torch.Tensor:
        return self.l_slr


@dataclass
class S2GTOutput:
    s2g: S2GOutput
    l_ce: torch.Tensor
    l_slt: torch.Tensor

    @property
    def l_slr(self) -> torch.Tensor:
        return self.s2g.l_slr

    @property
    def feasible(self) -> bool:
        return self.s2g.feasible

    @property
    def loss(self) -> torch.Tensor:
        return self.l_slt


def _weighted(weight: float, loss: torch.Tensor) -> Optional[torch.Tensor]:
    # a zero weight drops the term, which keeps 0 * inf out of the sum
    return None if weight == 0 else tc.scalar_mul(loss, weight)


def _total(terms) -> torch.Tensor:
    terms = [t for t in terms if t is not None]
    out = terms[0]
    for t in terms[1:]:
        out = tc.add(out, t)
    return out


def forward_s2g(model, sample: ClipSample, train_cfg) -> S2GOutput:
    """CTC on the fused tokens (L_inter) and on the gloss-aware tokens (L_final)."""
    enc = model.encode(sample.sparse)
    inter = ctc_loss(enc.inter_log_probs, sample.glosses)
    final = ctc_loss(enc.log_probs, sample.glosses)
    weighted = [(w, r) for w, r in ((train_cfg.lambda_inter, inter), (train_cfg.lambda_final, final)) if w != 0]
    # only terms that enter the objective decide whether the clip can be trained on
    feasible = all(r.feasible for _, r in weighted)
    if not weighted:
        l_slr = enc.log_probs.sum() * 0.0
    elif not feasible:
        l_slr = enc.log_probs.sum() * 0.0 + math.inf
    else:
        l_slr = _total([_weighted(w, r.loss) for w, r in weighted])
    return S2GOutput(inter.loss, final.loss, l_slr, enc.log_probs, feasible, enc)


def forward_s2gt(model, sample: ClipSample, train_cfg) -> S2GTOutput:
    """S2G losses plus teacher-forced decoder cross-entropy on the word targets."""
    if model.decoder is None:
        raise ValueError("forward_s2gt needs a model built with train.protocol=s2gt")
    if not sample.words:
        raise ValueError(f"clip {sample.clip_id} has no word targets")
    s2g = forward_s2g(model, sample, train_cfg)
    device = s2g.log_probs.device
    inputs = torch.tensor([[BOS_ID] + list(sample.words)], dtype=torch.long, device=device)
    targets = torch.tensor(list(sample.words) + [EOS_ID], dtype=torch.long, device=device)
    logits = model.decoder(s2g.encoded.memory, inputs)
    l_ce = cross_entropy(logits[0], targets)
    ce_term = _weighted(train_cfg.lambda_ce, l_ce)
    if ce_term is None or not s2g.feasible:
        l_slt = s2g.l_slr
    else:
        l_slt = tc.add(s2g.l_slr, ce_term)
    return S2GTOutput(s2g, l_ce, l_slt)


def _rng_to_text(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def _rng_from_text(text: str) -> torch.Tensor:
    return torch.frombuffer(bytearray(base64.b64decode(text)), dtype=torch.uint8).clone()


class Trainer(object):
    """
    Owns the model, optimizer, datasets and run directory of one training run.

    Args:
        cfg: validated configuration.
        output_dir (str or pathlib.Path, optional): run directory; defaults to ``paths.output_dir``.
        corpus (Corpus, optional): an already loaded corpus; read from ``paths.corpus_dir`` otherwise.
        progress (bool): show tqdm bars.
    """

    def __init__(self, cfg, output_dir=None, corpus: Optional[Corpus] = None, progress: bool = True):
        self.cfg = cfg
        self.output_dir = Path(output_dir or cfg.paths.output_dir)
        self.progress = progress
        self.dtype = PRECISION_TO_TYPE[cfg.train.precision]
        self.corpus = corpus if corpus is not None else load_corpus(cfg.paths.corpus_dir)
        for split in ("train", "dev"):
            if not self.corpus.splits.get(split):
                raise CorpusError(f"corpus at {self.corpus.root} has an empty {split} split")

        set_reproducible(cfg.seed)
        self.gloss_vocab = GlossVocab(self.corpus.gloss_vocab)
        self.word_vocab = WordVocab(self.corpus.word_vocab)
        self.config_hash = config_hash(cfg, len(self.gloss_vocab), len(self.word_vocab))
        self.model = load_model(cfg, len(self.gloss_vocab), len(self.word_vocab), {'dtype': self.dtype})
        self.params = dict(self.model.named_parameters())
        t = cfg.train
        self.optimizer = Adam(self.model.parameters(), lr=t.lr0, betas=tuple(t.betas), eps=t.eps,
                              weight_decay=t.weight_decay)
        if t.checked:
            tc.install_finite_checks(self.model)

        e = cfg.event
        data_kwargs = dict(n_segments=e.n_segments, n_bins=e.n_bins, window_us=e.window_us,
                           threshold=cfg.backbone.threshold, dtype=self.dtype)
        self.train_set = EventClipDataset(self.corpus, "train", **data_kwargs)
        self.dev_set = EventClipDataset(self.corpus, "dev", **data_kwargs)

        self.start_epoch = 0
        self.best_wer: Optional[float] = None
        self.history: List[dict] = []
        # mean clip loss of every optimizer step taken by this process, not checkpointed
        self.step_losses: List[float] = []
        n_params = sum(p.numel() for p in self.model.parameters())
        logger.info(f"Model built: {n_params} parameters, protocol {t.protocol}, precision {t.precision}")

    # ---------------------------------------------------------------- state

    def optimizer_state(self) -> Dict[str, torch.Tensor]:
        flat = {}
        for name, p in self.params.items():
            state = self.optimizer.state.get(p)
            if not state:
                continue
            flat[f"{name}.exp_avg"] = state["exp_avg"]
            flat[f"{name}.exp_avg_sq"] = state["exp_avg_sq"]
            flat[f"{name}.step"] = torch.tensor(float(state["step"]))
        return flat

    def load_optimizer_state(self, flat: Dict[str, torch.Tensor]):
        self.optimizer.state.clear()
        for name, p in self.params.items():
            if f"{name}.step" not in flat:
                continue
            try:
                self.optimizer.state[p] = {
                    "step": int(flat[f"{name}.step"].item()),
                    "exp_avg": flat[f"{name}.exp_avg"].to(p.dtype).reshape(p.shape).clone(),
                    "exp_avg_sq": flat[f"{name}.exp_avg_sq"].to(p.dtype).reshape(p.shape).clone(),
                }
            except (KeyError, RuntimeError) as e:
                raise CheckpointError(f"optimizer state for {name} is incomplete or misshaped: {e}")

    def checkpoint(self, epoch: int) -> Checkpoint:
        metadata = {
            "best_dev_wer": self.best_wer,
            "config": OmegaConf.to_container(self.cfg, resolve=True),
            "gloss_vocab": list(self.gloss_vocab.glosses),
            "word_vocab": list(self.word_vocab.words),
            "history": self.history,
            "torch_rng": _rng_to_text(torch.get_rng_state()),
        }
        return Checkpoint(self.config_hash, epoch, model_state(self.model), self.optimizer_state(), metadata)

    def resume(self, path):
        ckpt = load_checkpoint(path, expected_hash=self.config_hash)
        if ckpt.epoch > self.cfg.train.epochs:
            raise CheckpointError(f"checkpoint epoch {ckpt.epoch} exceeds train.epochs={self.cfg.train.epochs}")
        restore_model(self.model, ckpt.params)
        self.load_optimizer_state(ckpt.optimizer)
        meta = ckpt.metadata
        self.best_wer = meta.get("best_dev_wer")
        self.history = [r for r in meta.get("history", []) if r["epoch"] <= ckpt.epoch]
        if "torch_rng" in meta:
            torch.set_rng_state(_rng_from_text(meta["torch_rng"]))
        self.start_epoch = ckpt.epoch
        logger.info(f"Resumed from {path} at epoch {ckpt.epoch}")
        return ckpt

    # ---------------------------------------------------------------- steps

    def forward(self, sample: ClipSample):
        if self.cfg.train.protocol == "s2gt":
            return forward_s2gt(self.model, sample, self.cfg.train)
        return forward_s2g(self.model, sample, self.cfg.train)

    def clip_gradients(self, sample: ClipSample):
        out = self.forward(sample)
        if not out.feasible:
            logger.warning(f"Skipping clip {sample.clip_id}: gloss target longer than the token sequence allows")
            return None, None
        grads = tc.backward(out.loss, self.params)
        return float(out.loss.detach()), grads

    def train_step(self, batch: List[ClipSample], lr: float) -> List[float]:
        """One optimizer step over ``batch``; returns the losses of the clips that contributed."""
        self.model.train()
        losses, merged = [], None
        for sample in sorted(batch, key=lambda s: s.index):
            loss, grads = self.clip_gradients(sample)
            if grads is None:
                continue
            losses.append(loss)
            if merged is None:
                merged = grads
            else:
                for name, g in grads.items():
                    merged[name] = merged[name] + g
        if merged is None:
            return losses
        for name, p in self.params.items():
            p.grad = merged[name] / len(batch) if name in merged else None
        self.optimizer.set_lr(lr)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        return losses

    def evaluate_dev(self) -> ScoreReport:
        recognizer = Recognizer(self.cfg, self.model, self.gloss_vocab, self.word_vocab)
        report, _ = recognizer.score((self.dev_set[i] for i in range(len(self.dev_set))), "dev",
                                     progress=self.progress)
        return report

    def loader(self, epoch: int) -> DataLoader:
        generator = torch.Generator().manual_seed(self.cfg.seed * 100003 + epoch)
        return DataLoader(self.train_set, batch_size=self.cfg.train.batch_size, shuffle=True,
                          generator=generator, collate_fn=collate_clips, num_workers=0)

    # ---------------------------------------------------------------- loop

    def fit(self, until_epoch: Optional[int] = None) -> List[dict]:
        """Train from ``start_epoch``; ``until_epoch`` stops early (after that 1-based epoch) as if interrupted."""
        t = self.cfg.train
        stop = t.epochs if until_epoch is None else min(until_epoch, t.epochs)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.train_set.prefetch()
        self.dev_set.prefetch()
        self._rewrite_report()

        with tc.checked_mode(t.checked):
            for epoch in range(self.start_epoch, stop):
                lr = cosine_lr(epoch, t.epochs, t.lr0, t.lr_min)
                epoch_losses = []
                bar = tqdm(self.loader(epoch), desc=f"epoch {epoch + 1}/{t.epochs}",
                           disable=not self.progress, leave=False)
                for batch in bar:
                    losses = self.train_step(batch, lr)
                    epoch_losses.extend(losses)
                    if losses:
                        self.step_losses.append(sum(losses) / len(losses))
                        bar.set_postfix(loss=f"{sum(losses) / len(losses):.4f}")
                    logger.debug(f"epoch {epoch + 1} clips {[s.clip_id for s in batch]} losses {losses}")

                dev = self.evaluate_dev()
                record = {
                    "epoch": epoch + 1,
                    "lr": lr,
                    "train_loss": sum(epoch_losses) / len(epoch_losses) if epoch_losses else math.nan,
                    "dev_wer": dev.wer,
                }
                if t.protocol == "s2gt":
                    record["dev_bleu1"] = dev.bleu[0]
                self.history.append(record)
                self._append_report(record)
                logger.info(f"epoch {epoch + 1}/{t.epochs} lr {lr:.3g} train_loss {record['train_loss']:.4f} "
                            f"dev_wer {dev.wer:.4f}" + (f" dev_bleu1 {record['dev_bleu1']:.2f}"
                                                        if "dev_bleu1" in record else ""))

                improved = self.best_wer is None or dev.wer < self.best_wer
                if improved:
                    self.best_wer = dev.wer
                ckpt = self.checkpoint(epoch + 1)
                save_checkpoint(ckpt, self.output_dir / LAST_NAME)
                if improved:
                    save_checkpoint(ckpt, self.output_dir / BEST_NAME)
                    logger.info(f"New best dev WER {dev.wer:.4f}, saved {self.output_dir / BEST_NAME}")
        return self.history

    def _rewrite_report(self):
        path = self.output_dir / REPORT_NAME
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.history), encoding="utf-8")

    def _append_report(self, record: dict):
        with open(self.output_dir / REPORT_NAME, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def train(cfg, resume=None, output_dir=None, corpus: Optional[Corpus] = None, progress: bool = True) -> Trainer:
    trainer = Trainer(cfg, output_dir=output_dir, corpus=corpus, progress=progress)
    if resume is not None:
        trainer.resume(resume)
    trainer.fit()
    logger.info(f"Training finished; best dev WER {trainer.best_wer}")
    return trainer


def evaluate(cfg, checkpoint, split: str = "dev", output_dir=None, limit: Optional[int] = None,
             corpus: Optional[Corpus] = None, progress: bool = True) -> ScoreReport:
    """Score ``split`` with ``checkpoint``; writes ``<split>.report.json`` and ``<split>.hyps.jsonl``."""
    corpus = corpus if corpus is not None else load_corpus(cfg.paths.corpus_dir)
    if not corpus.splits.get(split):
        raise CorpusError(f"corpus at {corpus.root} has no clips in split {split!r}")
    recognizer = Recognizer.from_checkpoint(cfg, checkpoint, corpus)
    e = cfg.event
    dataset = EventClipDataset(corpus, split, e.n_segments, e.n_bins, e.window_us, cfg.backbone.threshold,
                               limit=limit, dtype=PRECISION_TO_TYPE[cfg.train.precision])
    dataset.prefetch()
    report, rows = recognizer.score((dataset[i] for i in range(len(dataset))), split, progress=progress)

    out = Path(output_dir or cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{split}.report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / f"{split}.hyps.jsonl").write_text("".join(r.to_json() + "\n" for r in rows), encoding="utf-8")
    logger.info(f"{split}: WER {report.wer:.4f} over {report.n_clips} clips"
                + (f", BLEU-1 {report.bleu[0]:.2f}, ROUGE-L {report.rouge_l:.4f}" if report.bleu else ""))
    return report
