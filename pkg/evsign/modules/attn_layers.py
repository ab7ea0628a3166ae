import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from evsign import tensor_core as tc


class BasicAttentionLayer(nn.Module):
    def __init__(self, attn_mode='vanilla'):
        super().__init__()
        self.attn_mode = attn_mode

    def set_attn_mode(self, new_mode):
        self.attn_mode = new_mode


MEMORY_LAYOUT = {
    "torch": (
        lambda x: x.transpose(1, 2),
        lambda x: x.transpose(1, 2),
    ),
    "vanilla": (
        lambda x: x.transpose(1, 2),
        lambda x: x.transpose(1, 2),
    ),
}


def attention(q, k, v, mode='vanilla', attn_mask=None, causal=False, score_mask=None, return_attn=False):
    """
    Perform multi-head QKV attention.

    Args:
        q (torch.Tensor): Query tensor with shape [b, s, a, d], where a is the number of heads.
        k (torch.Tensor): Key tensor with shape [b, s1, a, d]
        v (torch.Tensor): Value tensor with shape [b, s1, a, d]
        mode (str): Attention mode. Choose from 'torch' and 'vanilla'.
        attn_mask (torch.Tensor): Boolean mask broadcastable to [b, a, s, s1]; False entries are excluded
            from the softmax. (default: None)
        causal (bool): Whether to use causal attention. (default: False)
        score_mask (torch.Tensor): Real multiplier broadcastable to [b, a, s, s1], applied elementwise to
            the scaled scores before the softmax. Zeroed scores still take part in the softmax.
            Only supported in 'vanilla' mode. (default: None)
        return_attn (bool): Also return the [b, a, s, s1] attention weights ('vanilla' only).

    Returns:
        torch.Tensor: Output tensor after attention with shape [b, s, ad]
    """
    pre_attn_layout, post_attn_layout = MEMORY_LAYOUT[mode]
    q = pre_attn_layout(q)
    k = pre_attn_layout(k)
    v = pre_attn_layout(v)
    attn = None

    if mode == 'torch':
        assert score_mask is None and not return_attn, "score_mask/return_attn need the vanilla mode"
        x = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask, is_causal=causal)

    elif mode == 'vanilla':
        scale_factor = 1 / math.sqrt(q.size(-1))

        b, a, s, _ = q.shape
        s1 = k.size(2)
        attn_bias = torch.zeros(b, a, s, s1, dtype=q.dtype, device=q.device)
        if causal:
            # Only applied to self attention
            assert attn_mask is None, "Causal mask and attn_mask cannot be used together"
            temp_mask = torch.ones(s, s, dtype=torch.bool, device=q.device).tril(diagonal=0)
            attn_bias.masked_fill_(temp_mask.logical_not(), float("-inf"))

        if attn_mask is not None:
            attn_bias.masked_fill_(attn_mask.logical_not(), float("-inf"))

        scores = tc.scalar_mul(tc.matmul(q, k.transpose(-2, -1)), scale_factor)
        if score_mask is not None:
            scores = tc.mul(scores, score_mask.to(scores.dtype))
        attn = tc.softmax(scores + attn_bias, axis=-1)
        x = tc.matmul(attn, v)
    else:
        raise NotImplementedError(f'Unsupported attention mode: {mode}')

    x = post_attn_layout(x)
    out = rearrange(x, "b s a d -> b s (a d)")
    if return_attn:
        return out, attn
    return out


class SelfAttentionLayer(BasicAttentionLayer):
    def __init__(self,
                 dim,
                 num_heads,
                 qkv_bias=True,
                 dtype=None,
                 device=None,
                 attn_mode='vanilla',
                 ) -> None:
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__(attn_mode)
        self.dim = dim
        self.num_heads = num_heads
        assert self.dim % num_heads == 0, "dim must be divisible by num_heads"
        self.head_dim = self.dim // num_heads

        self.Wqkv = nn.Linear(dim, dim * 3, bias=qkv_bias, **factory_kwargs)
        self.out_proj = nn.Linear(dim, dim, bias=qkv_bias, **factory_kwargs)

    def forward(self, x, attn_mask=None, causal=False, return_attn=False):
        """
        Args:
            x (torch.Tensor): (batch, seq_len, hidden_dim) (where hidden_dim = num heads * head dim)
            attn_mask (torch.Tensor, optional): (seq_len, seq_len) boolean, True = may attend
            causal (bool): position u only attends to positions <= u
        """
        qkv = self.Wqkv(x)
        q, k, v = rearrange(qkv, "b s (three a d) -> three b s a d", three=3, a=self.num_heads)

        context = attention(q, k, v, mode=self.attn_mode, attn_mask=attn_mask, causal=causal,
                            return_attn=return_attn)
        if return_attn:
            context, attn = context
            return self.out_proj(context), attn
        return self.out_proj(context)


class CrossAttentionLayer(BasicAttentionLayer):
    """Multi-head cross-attention with separate key and value inputs and an optional score multiplier."""

    def __init__(self,
                 qdim,
                 kdim,
                 num_heads,
                 qkv_bias=True,
                 dtype=None,
                 device=None,
                 attn_mode='vanilla',
                 ):
        factory_kwargs = {'device': device, 'dtype': dtype}
        super().__init__(attn_mode)
        self.qdim = qdim
        self.kdim = kdim
        self.num_heads = num_heads
        assert self.qdim % num_heads == 0, "qdim must be divisible by num_heads"
        self.head_dim = self.qdim // num_heads

        self.q_proj = nn.Linear(qdim, qdim, bias=qkv_bias, **factory_kwargs)
        self.k_proj = nn.Linear(kdim, qdim, bias=qkv_bias, **factory_kwargs)
        self.v_proj = nn.Linear(kdim, qdim, bias=qkv_bias, **factory_kwargs)
        self.out_proj = nn.Linear(qdim, qdim, bias=qkv_bias, **factory_kwargs)

    def forward(self, x, k, v=None, score_mask=None, return_attn=False):
        """
        Args:
            x (torch.Tensor): (batch, seq_len, qdim) queries
            k (torch.Tensor): (batch, seq_len1, kdim) keys
            v (torch.Tensor, optional): (batch, seq_len1, kdim) values, defaults to ``k``
            score_mask (torch.Tensor, optional): (batch, seq_len, seq_len1) multiplier shared by all heads
        """
        v = k if v is None else v
        q = rearrange(self.q_proj(x), "b s (a d) -> b s a d", a=self.num_heads)
        key = rearrange(self.k_proj(k), "b s (a d) -> b s a d", a=self.num_heads)
        value = rearrange(self.v_proj(v), "b s (a d) -> b s a d", a=self.num_heads)
        if score_mask is not None:
            if score_mask.shape[-2:] != (q.shape[1], key.shape[1]):
                raise ValueError(f"mask {tuple(score_mask.shape)} does not match {q.shape[1]} queries "
                                 f"x {key.shape[1]} keys")
            score_mask = score_mask.unsqueeze(-3) if score_mask.dim() == 3 else score_mask

        context = attention(q, key, value, mode=self.attn_mode, score_mask=score_mask, return_attn=return_attn)
        if return_attn:
            context, attn = context
            return self.out_proj(context), attn
        return self.out_proj(context)


def window_attention_mask(n: int, window: int, device=None) -> torch.Tensor:
    """Block-diagonal (n, n) mask of non-overlapping windows; the last window may be shorter."""
    if window < 1:
        raise ValueError(f"window size must be >= 1, got {window}")
    block = torch.arange(n, device=device) // window
    return block.unsqueeze(0) == block.unsqueeze(1)


class WindowSelfAttention(SelfAttentionLayer):
    """Self-attention restricted to non-overlapping windows of ``window`` tokens."""

    def __init__(self, dim, num_heads, window, **kwargs):
        super().__init__(dim, num_heads, **kwargs)
        if window < 1:
            raise ValueError(f"window size must be >= 1, got {window}")
        self.window = window

    def forward(self, x, return_attn=False):
        if x.shape[1] < 1:
            raise ValueError("window attention needs at least one token")
        mask = window_attention_mask(x.shape[1], self.window, device=x.device)
        return super().forward(x, attn_mask=mask, return_attn=return_attn)


def window_msa(tokens: torch.Tensor, layer: WindowSelfAttention) -> torch.Tensor:
    """Apply windowed MSA to ``(n, C)`` or ``(b, n, C)`` tokens."""
    if tokens.dim() == 2:
        return layer(tokens.unsqueeze(0))[0]
    return layer(tokens)
