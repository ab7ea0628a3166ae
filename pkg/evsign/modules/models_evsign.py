from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .heads import RecognitionHead, TranslationDecoder
from .sparse_conv import SparseBackbone, SparseTensor
from .temporal_layers import GlossAwareTemporalAggregation, TemporalOutput


@dataclass
class EncoderOutput:
    temporal: TemporalOutput
    inter_log_probs: torch.Tensor   # (L, Y) from the fused tokens
    log_probs: torch.Tensor         # (L, Y) from the gloss-aware tokens

    @property
    def memory(self) -> torch.Tensor:
        return self.temporal.gloss_tokens.tokens

    @property
    def mask(self) -> Optional[torch.Tensor]:
        return self.temporal.mask


class EvSignNet(nn.Module):
    """
    Sparse backbone -> gloss-aware temporal aggregation -> recognition heads (+ translation decoder).

    Args:
        cfg: validated configuration (``evsign.config.EvSignConfig`` schema).
        n_glosses (int): gloss vocabulary size including the blank.
        n_words (int): word vocabulary size including the specials.
    """

    def __init__(self, cfg, n_glosses: int, n_words: int, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        t, d = cfg.temporal, cfg.decoder
        self.backbone = SparseBackbone(
            cfg.event.n_bins, list(cfg.backbone.channels), list(cfg.backbone.strides),
            cfg.backbone.kernel_size, cfg.backbone.threshold, **factory_kwargs)
        self.temporal = GlossAwareTemporalAggregation(
            t.dim, t.num_heads, t.window, t.gamma, t.sigma, t.mlp_ratio, t.fusion, t.mask_mode, **factory_kwargs)
        self.inter_head = RecognitionHead(t.dim, n_glosses, **factory_kwargs)
        self.head = RecognitionHead(t.dim, n_glosses, **factory_kwargs)
        self.decoder = None
        if cfg.train.protocol == "s2gt":
            self.decoder = TranslationDecoder(t.dim, n_words, d.n_blocks, d.num_heads, d.mlp_ratio, **factory_kwargs)
        self.n_glosses = n_glosses
        self.n_words = n_words

    def encode(self, x: SparseTensor) -> EncoderOutput:
        visual = self.backbone(x).unsqueeze(0)          # (1, P, C)
        temporal = self.temporal(visual)
        inter = self.inter_head(temporal.fused.tokens)[0]
        final = self.head(temporal.gloss_tokens.tokens)[0]
        return EncoderOutput(temporal, inter, final)

    def forward(self, x: SparseTensor) -> EncoderOutput:
        return self.encode(x)
