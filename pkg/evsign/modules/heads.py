import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from evsign import tensor_core as tc
from evsign.constants import BLANK_ID, BLANK_TOKEN, BOS_ID, EOS_ID, PAD_ID, UNK_ID, WORD_SPECIALS
from .attn_layers import CrossAttentionLayer, SelfAttentionLayer
from .mlp_layers import FeedForward
from .norm_layers import get_norm_layer
from .posemb_layers import sinusoidal_pe

# stands in for log(0) so that gradients through logsumexp stay finite
NEG = -1e30


class GlossVocab:
    """Gloss names with the CTC blank fixed at id 0."""

    def __init__(self, glosses: Sequence[str]):
        glosses = list(glosses)
        if not glosses or glosses[0] != BLANK_TOKEN:
            glosses = [BLANK_TOKEN] + glosses
        if len(set(glosses)) != len(glosses):
            raise ValueError("gloss names must be unique")
        self.glosses = glosses
        self.index = {g: i for i, g in enumerate(glosses)}

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    def __len__(self) -> int:
        return len(self.glosses)

    def encode(self, names: Sequence[str]) -> List[int]:
        unknown = [n for n in names if n not in self.index]
        if unknown:
            raise ValueError(f"unknown gloss(es): {unknown}")
        return [self.index[n] for n in names]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.glosses[i] for i in ids]


class WordVocab:
    """Words with the specials <bos>, <eos>, <pad>, <unk> at ids 0-3."""

    def __init__(self, words: Sequence[str]):
        words = [w for w in words if w not in WORD_SPECIALS]
        self.words = list(WORD_SPECIALS) + words
        if len(set(self.words)) != len(self.words):
            raise ValueError("words must be unique")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.index.get(w, UNK_ID) for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.words[i] for i in ids if i not in (BOS_ID, EOS_ID, PAD_ID)]


class RecognitionHead(nn.Module):
    """Fully connected layer followed by log-softmax over the gloss vocabulary (blank included)."""

    def __init__(self, dim, n_classes, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        self.dim = dim
        self.fc = nn.Linear(dim, n_classes, **factory_kwargs)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"recognition head expects dim {self.dim}, got {x.shape[-1]}")
        return tc.log_softmax(self.fc(x), axis=-1)


@dataclass
class CTCResult:
    loss: torch.Tensor
    feasible: bool


def ctc_repeats(target: Sequence[int]) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(log_probs: torch.Tensor, target: Sequence[int], blank: int = BLANK_ID) -> CTCResult:
    """
    Negative log-likelihood of ``target`` under CTC, by the forward recursion in log space.

    Args:
        log_probs (torch.Tensor): [L, Y] per-frame log-probabilities.
        target (Sequence[int]): gloss ids without blanks, possibly empty.

    Returns:
        CTCResult: ``feasible=False`` and an infinite loss with zero gradient when
        ``L < Z + repeats(target)``.
    """
    if log_probs.dim() != 2 or log_probs.shape[0] == 0:
        raise ValueError(f"log_probs must be a non-empty [L, Y] matrix, got {tuple(log_probs.shape)}")
    target = [int(t) for t in target]
    L, Y = log_probs.shape
    if any(t == blank or not 0 <= t < Y for t in target):
        raise ValueError(f"target ids must be non-blank classes in [0, {Y})")
    if L < len(target) + ctc_repeats(target):
        return CTCResult(log_probs.sum() * 0.0 + math.inf, False)

    ext = [blank]
    for t in target:
        ext += [t, blank]
    S = len(ext)
    ext_ids = torch.tensor(ext, dtype=torch.long, device=log_probs.device)
    emit = log_probs[:, ext_ids]                           # [L, S]
    skip = torch.tensor([s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] for s in range(S)],
                        device=log_probs.device)
    neg = torch.full((S,), NEG, dtype=log_probs.dtype, device=log_probs.device)
    start = torch.arange(S, device=log_probs.device) < 2

    alpha = torch.where(start, emit[0], neg)
    for l in range(1, L):
        from_prev = torch.cat([neg[:1], alpha[:-1]])
        from_skip = torch.where(skip, torch.cat([neg[:2], alpha[:-2]]), neg)
        alpha = torch.logsumexp(torch.stack([alpha, from_prev, from_skip]), dim=0) + emit[l]
    final = alpha[-2:] if S > 1 else alpha[-1:]
    return CTCResult(-torch.logsumexp(final, dim=0), True)


def ctc_greedy_decode(log_probs: torch.Tensor, blank: int = BLANK_ID) -> List[int]:
    """Best path: per-frame argmax, collapse repeats, drop blanks."""
    best = log_probs.argmax(dim=-1).tolist()
    out, prev = [], None
    for k in best:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


class DecoderBlock(nn.Module):
    """Pre-norm block: causal self-attention, encoder-decoder attention, feed-forward."""

    def __init__(self, dim, num_heads, mlp_ratio=4, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        norm_layer = get_norm_layer("layer")
        self.norm1 = norm_layer(dim, **factory_kwargs)
        self.self_attn = SelfAttentionLayer(dim, num_heads, **factory_kwargs)
        self.norm2 = norm_layer(dim, **factory_kwargs)
        self.cross_attn = CrossAttentionLayer(dim, dim, num_heads, **factory_kwargs)
        self.norm3 = norm_layer(dim, **factory_kwargs)
        self.mlp = FeedForward(dim, mlp_ratio, **factory_kwargs)

    def forward(self, x, memory):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), memory)
        x = x + self.mlp(self.norm3(x))
        return x


class TranslationDecoder(nn.Module):
    def __init__(self, dim, n_words, n_blocks=4, num_heads=4, mlp_ratio=4, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(n_words, dim, **factory_kwargs)
        self.blocks = nn.ModuleList([
            DecoderBlock(dim, num_heads, mlp_ratio, **factory_kwargs) for _ in range(n_blocks)
        ])
        self.final_norm = get_norm_layer("layer")(dim, **factory_kwargs)
        self.proj = nn.Linear(dim, n_words, **factory_kwargs)

    def forward(self, memory: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """
        Args:
            memory (torch.Tensor): (b, L, C) gloss-aware tokens.
            tokens (torch.Tensor): (b, U) word ids starting with <bos> (teacher forcing).

        Returns:
            torch.Tensor: (b, U, n_words) logits.
        """
        if tokens.shape[-1] == 0:
            raise ValueError("decoder input must contain at least <bos>")
        U = tokens.shape[-1]
        x = tc.embedding_lookup(self.embed.weight, tokens) * math.sqrt(self.dim)
        x = x + sinusoidal_pe(U, self.dim, dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x = block(x, memory)
        return self.proj(self.final_norm(x))

    @torch.no_grad()
    def generate(self, memory: torch.Tensor, max_len: int) -> List[int]:
        """Greedy decoding from <bos> until <eos> or ``max_len`` words; specials stripped."""
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        ids = [BOS_ID]
        out = []
        for _ in range(max_len):
            logits = self(memory, torch.tensor([ids], dtype=torch.long, device=memory.device))
            nxt = int(logits[0, -1].argmax())
            if nxt == EOS_ID:
                break
            ids.append(nxt)
            if nxt not in (BOS_ID, PAD_ID):
                out.append(nxt)
        return out


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean negative log-likelihood over non-pad positions."""
    targets = targets.reshape(-1)
    logits = logits.reshape(-1, logits.shape[-1])
    if logits.shape[0] != targets.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    if not (targets != pad_id).any():
        raise ValueError("target contains only padding")
    return F.cross_entropy(logits, targets, ignore_index=pad_id)
