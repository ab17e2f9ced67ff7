"""Transformer pieces shared by the visual and text encoders."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

MASK_FILL = -1e9


class MaskedAttention(nn.Module):
    """Multi-head attention with a separate key/value sequence.

    ``mask`` is boolean and broadcastable to ``(batch, queries, keys)``;
    ``True`` marks an allowed slot. Masked slots are filled with a large
    negative logit and zeroed again after the softmax, so their weight is
    exactly 0 regardless of precision.
    """

    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)
        nn.init.xavier_uniform_(self.in_proj_weight)

    def forward(self, q, kv, mask=None, return_weights=False):
        b, lq, d = q.shape
        lk = kv.shape[1]
        h = self.heads
        w_q, w_k, w_v = self.in_proj_weight.chunk(3)
        b_q, b_k, b_v = self.in_proj_bias.chunk(3)
        q = F.linear(q, w_q, b_q).view(b, lq, h, d // h).transpose(1, 2)
        k = F.linear(kv, w_k, b_k).view(b, lk, h, d // h).transpose(1, 2)
        v = F.linear(kv, w_v, b_v).view(b, lk, h, d // h).transpose(1, 2)

        logits = q @ k.transpose(-2, -1) / (d // h) ** 0.5
        if mask is not None:
            allowed = mask.unsqueeze(1) if mask.dim() == 3 else mask
            logits = logits.masked_fill(~allowed, MASK_FILL)
            weights = logits.softmax(dim=-1).masked_fill(~allowed, 0.0)
        else:
            weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, d)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class ResidualBlock(nn.Module):
    """Pre-norm transformer block (attention then MLP)."""

    def __init__(self, width, heads, mlp_ratio=4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = MaskedAttention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(),
            nn.Linear(width * mlp_ratio, width),
        )

    def mlp_residual(self, x):
        return x + self.mlp(self.ln_2(x))

    def forward(self, x, mask=None, extra_kv=None):
        """Self-attention over ``x``; ``extra_kv`` tokens are appended to the keys."""
        y = self.ln_1(x)
        kv = y if extra_kv is None else torch.cat([y, self.ln_1(extra_kv)], dim=1)
        x = x + self.attn(y, kv, mask)
        return self.mlp_residual(x)


def init_block(block: ResidualBlock, generator, width, layers):
    """CLIP-style scaled normal init, drawn from ``generator``."""
    proj_std = width ** -0.5 * (2 * layers) ** -0.5
    attn_std = width ** -0.5
    fc_std = (2 * width) ** -0.5
    with torch.no_grad():
        block.attn.in_proj_weight.normal_(0, attn_std, generator=generator)
        block.attn.out_proj.weight.normal_(0, proj_std, generator=generator)
        block.attn.out_proj.bias.zero_()
        block.mlp[0].weight.normal_(0, fc_std, generator=generator)
        block.mlp[0].bias.zero_()
        block.mlp[2].weight.normal_(0, proj_std, generator=generator)
        block.mlp[2].bias.zero_()
