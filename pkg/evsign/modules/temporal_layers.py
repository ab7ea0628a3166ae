"""
Temporal modelling over the per-segment visual tokens.

Local token fusion compresses P visual tokens into L = ceil(P / gamma) fused
tokens. The intra-gloss block lets every fused token attend back to the visual
tokens through a gloss-aware mask that combines learned token similarity with
an RBF prior on pseudo-timestamps; the inter-gloss block then applies global
self-attention across the fused tokens.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from evsign import tensor_core as tc
from evsign.constants import FUSION_MODES, HARD_MASK_THRESHOLD, MASK_MODES
from .attn_layers import CrossAttentionLayer, SelfAttentionLayer, WindowSelfAttention
from .mlp_layers import FeedForward
from .posemb_layers import fused_pseudo_timestamps, sinusoidal_pe, visual_pseudo_timestamps


@dataclass
class TokenSeq:
    tokens: torch.Tensor       # (b, n, C)
    pseudo_ts: torch.Tensor    # (n,)

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if self.pseudo_ts.numel() != n:
            raise ValueError(f"{self.pseudo_ts.numel()} pseudo-timestamps for {n} tokens")
        if n > 1 and not (self.pseudo_ts[1:] > self.pseudo_ts[:-1]).all():
            raise ValueError("pseudo-timestamps must be strictly increasing")

    def __len__(self):
        return self.tokens.shape[-2]


@dataclass
class TemporalOutput:
    visual: TokenSeq
    fused: TokenSeq
    refined: TokenSeq            # after the intra-gloss block
    gloss_tokens: TokenSeq       # after the inter-gloss block
    mask: Optional[torch.Tensor]  # (b, L, P) or None when the intra-gloss block is off


class LocalTokenFusion(nn.Module):
    """Two rounds of (windowed MSA + residual) followed by temporal pooling with kernel = stride = sqrt(gamma)."""

    def __init__(self, dim, num_heads, window=8, gamma=4, fusion="ltf", device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        r = math.isqrt(gamma)
        if gamma < 1 or r * r != gamma:
            raise ValueError(f"gamma must be a perfect square, got {gamma}")
        if fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion!r}")
        self.gamma = gamma
        self.pool = r
        self.fusion = fusion
        if fusion == "ltf":
            self.attn = nn.ModuleList([
                WindowSelfAttention(dim, num_heads, window, **factory_kwargs) for _ in range(2)
            ])

    def forward(self, x: torch.Tensor) -> TokenSeq:
        """
        Args:
            x (torch.Tensor): (b, P, C) visual tokens.

        Returns:
            TokenSeq: (b, L, C) fused tokens with L = ceil(P / gamma).
        """
        P = x.shape[1]
        if P == 0:
            raise ValueError("local token fusion needs at least one visual token")
        L = math.ceil(P / self.gamma)
        if L * self.gamma != P:
            x = F.pad(x, (0, 0, 0, L * self.gamma - P))
        for i in range(2):
            if self.fusion == "ltf":
                x = x + self.attn[i](x)
            if self.fusion == "avgpool":
                x = tc.avg_pool_1d(x, self.pool, self.pool)
            else:
                x = tc.max_pool_1d(x, self.pool, self.pool)
        return TokenSeq(x, fused_pseudo_timestamps(L, self.gamma, dtype=x.dtype))


def token_similarity(fused: torch.Tensor, visual: torch.Tensor, psi_f: nn.Module, psi_v: nn.Module) -> torch.Tensor:
    """rho = psi_f(O^f) psi_v(O^v)^T -> (..., L, P)."""
    if fused.shape[-1] != visual.shape[-1]:
        raise ValueError(f"token dims differ: {fused.shape[-1]} vs {visual.shape[-1]}")
    return tc.matmul(psi_f(fused), tc.transpose(psi_v(visual), -2, -1))


def time_prior(ts_f: torch.Tensor, ts_v: torch.Tensor, sigma: float) -> torch.Tensor:
    """delta_ij = exp(-(t^f_i - t^v_j)^2 / (2 sigma^2)) -> (L, P)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dt = ts_f.reshape(-1, 1) - ts_v.reshape(1, -1)
    return torch.exp(-(dt ** 2) / (2.0 * sigma ** 2))


def minmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise min-max scaling to [0, 1]; constant rows become all ones."""
    lo = x.amin(dim=-1, keepdim=True)
    hi = x.amax(dim=-1, keepdim=True)
    span = hi - lo
    flat = span <= 0
    scaled = (x - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.ones_like(x), scaled)


def build_mask(rho: torch.Tensor, delta: torch.Tensor, mode: str = "soft") -> torch.Tensor:
    """M = N(rho) * N(delta) in the default ``soft`` mode; other modes keep one factor or drop both."""
    if mode not in MASK_MODES or mode == "off":
        raise ValueError(f"mask mode {mode!r} does not build a mask")
    if rho.shape[-2:] != delta.shape[-2:]:
        raise ValueError(f"rho {tuple(rho.shape)} and delta {tuple(delta.shape)} differ in shape")
    delta = delta.to(rho.dtype).expand_as(rho)
    if mode == "ones":
        return torch.ones_like(rho)
    if mode == "rho":
        return minmax_rows(rho)
    if mode == "delta":
        return minmax_rows(delta)
    mask = minmax_rows(rho) * minmax_rows(delta)
    if mode == "hard":
        return (mask > HARD_MASK_THRESHOLD).to(rho.dtype)
    return mask


def gama(layer: CrossAttentionLayer, Q, K, V, M, return_attn=False):
    """Gloss-aware mask attention: softmax(QK^T / sqrt(d) * M) V per head, heads share M."""
    return layer(Q, K, V, score_mask=M, return_attn=return_attn)


class IntraGlossBlock(nn.Module):
    def __init__(self, dim, num_heads, sigma=16.0, mlp_ratio=4, mask_mode="soft", device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        if mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mask_mode!r}")
        self.dim = dim
        self.sigma = sigma
        self.mask_mode = mask_mode
        self.psi_f = nn.Linear(dim, dim, bias=False, **factory_kwargs)
        self.psi_v = nn.Linear(dim, dim, bias=False, **factory_kwargs)
        self.gama = CrossAttentionLayer(dim, dim, num_heads, attn_mode="vanilla", **factory_kwargs)
        self.mlp = FeedForward(dim, mlp_ratio, **factory_kwargs)

    def build_mask(self, fused: TokenSeq, visual: TokenSeq) -> torch.Tensor:
        rho = token_similarity(fused.tokens, visual.tokens, self.psi_f, self.psi_v)
        delta = time_prior(fused.pseudo_ts, visual.pseudo_ts, self.sigma)
        return build_mask(rho, delta, self.mask_mode)

    def forward(self, fused: TokenSeq, visual: TokenSeq) -> Tuple[TokenSeq, Optional[torch.Tensor]]:
        if self.mask_mode == "off":
            return fused, None
        mask = self.build_mask(fused, visual)
        x = fused.tokens
        pe_q = sinusoidal_pe(len(fused), self.dim, fused.pseudo_ts, dtype=x.dtype, device=x.device)
        pe_k = sinusoidal_pe(len(visual), self.dim, visual.pseudo_ts, dtype=x.dtype, device=x.device)
        q = x + pe_q
        k = visual.tokens + pe_k
        o_hat = x + gama(self.gama, q, k, visual.tokens, mask)
        o_tilde = o_hat + self.mlp(o_hat)
        return TokenSeq(o_tilde, fused.pseudo_ts), mask


class InterGlossBlock(nn.Module):
    def __init__(self, dim, num_heads, device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        self.dim = dim
        self.msa = SelfAttentionLayer(dim, num_heads, attn_mode="vanilla", **factory_kwargs)

    def forward(self, x: TokenSeq) -> TokenSeq:
        tokens = x.tokens
        pe = sinusoidal_pe(len(x), self.dim, x.pseudo_ts, dtype=tokens.dtype, device=tokens.device)
        return TokenSeq(tokens + self.msa(tokens + pe), x.pseudo_ts)


class GlossAwareTemporalAggregation(nn.Module):
    """Local token fusion -> intra-gloss block -> inter-gloss block."""

    def __init__(self, dim, num_heads, window=8, gamma=4, sigma=16.0, mlp_ratio=4,
                 fusion="ltf", mask_mode="soft", device=None, dtype=None):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__()
        self.ltf = LocalTokenFusion(dim, num_heads, window, gamma, fusion, **factory_kwargs)
        self.intra = IntraGlossBlock(dim, num_heads, sigma, mlp_ratio, mask_mode, **factory_kwargs)
        self.inter = InterGlossBlock(dim, num_heads, **factory_kwargs)

    def forward(self, visual_tokens: torch.Tensor) -> TemporalOutput:
        """
        Args:
            visual_tokens (torch.Tensor): (b, P, C)
        """
        visual = TokenSeq(visual_tokens,
                          visual_pseudo_timestamps(visual_tokens.shape[1], dtype=visual_tokens.dtype))
        fused = self.ltf(visual_tokens)
        refined, mask = self.intra(fused, visual)
        out = self.inter(refined)
        return TemporalOutput(visual, fused, refined, out, mask)


def gata_forward(module: GlossAwareTemporalAggregation, visual_tokens: torch.Tensor) -> TemporalOutput:
    """``(P, C)`` or ``(b, P, C)`` visual tokens -> gloss-aware tokens plus the mask."""
    if visual_tokens.dim() == 2:
        visual_tokens = visual_tokens.unsqueeze(0)
    return module(visual_tokens)
