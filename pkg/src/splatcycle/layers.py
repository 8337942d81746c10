"""Building blocks shared by the denoiser and the reconstructor."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(V,) timesteps to (V, dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def groups_for(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ZeroLinear(nn.Linear):
    """Linear layer whose weight and bias start at exactly zero."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__(in_features, out_features)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ResBlock(nn.Module):
    """GroupNorm residual block with an additive per-sample embedding.

    With ``zero_time=True`` the embedding enters through a zero-initialized
    projection, so at initialization the block ignores it entirely.
    """

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, zero_time: bool = False):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups_for(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = ZeroLinear(emb_dim, out_ch) if zero_time else nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups_for(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def time_condition(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        return h + self.emb_proj(emb)[:, :, None, None]

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.time_condition(h, F.silu(emb))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def attention(q, k, v):
    """Plain softmax attention over the second-to-last axis."""
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return w @ v


class SelfAttention(nn.Module):
    """Per-view spatial self-attention with optional reference K/V injection.

    When ``ref_index`` is given, every other view attends over its own keys and
    values concatenated with those of the reference view. The reference view
    itself only sees its own tokens, so information flows one way.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups_for(channels), channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.out = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor, ref_index: Optional[int] = None) -> torch.Tensor:
        V, C, H, W = x.shape
        h = self.norm(x).reshape(V, C, H * W)
        q, k, v = self.qkv(h).reshape(V, 3, self.heads, C // self.heads, H * W).transpose(-1, -2).unbind(1)
        if ref_index is None or V == 1:
            o = attention(q, k, v)
        else:
            others = [i for i in range(V) if i != ref_index]
            k_cat = torch.cat([k[others], k[ref_index].expand(len(others), *k.shape[1:])], dim=2)
            v_cat = torch.cat([v[others], v[ref_index].expand(len(others), *v.shape[1:])], dim=2)
            o_others = attention(q[others], k_cat, v_cat)
            o_ref = attention(q[ref_index:ref_index + 1], k[ref_index:ref_index + 1], v[ref_index:ref_index + 1])
            o = torch.empty_like(q)
            o[others] = o_others
            o[ref_index] = o_ref[0]
        o = o.transpose(-1, -2).reshape(V, C, H * W)
        return x + self.out(o).reshape(V, C, H, W)


class MultiViewAttention(nn.Module):
    """Joint self-attention over the tokens of all views of one object."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups_for(channels), channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        V, C, H, W = x.shape
        tokens = self.norm(x).permute(0, 2, 3, 1).reshape(1, V * H * W, C)
        q, k, v = self.qkv(tokens).reshape(1, V * H * W, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        o = attention(q, k, v).permute(0, 2, 1, 3).reshape(V, H, W, C)
        return x + self.out(o).permute(0, 3, 1, 2)


class GatedCrossAttention(nn.Module):
    """``x + gate * CrossAttn(query=x, key/value=context)`` with the gate at 0."""

    def __init__(self, channels: int, context_channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups_for(channels), channels)
        # no affine terms on the context path: all-zero context must contribute exactly 0
        self.ctx_norm = nn.GroupNorm(groups_for(context_channels), context_channels, affine=False)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(context_channels, channels * 2, bias=False)
        self.out = nn.Linear(channels, channels, bias=False)
        self.gate = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor]) -> torch.Tensor:
        if context is None:
            return x
        V, C, H, W = x.shape
        if context.shape[0] != V or context.shape[-2:] != (H, W):
            raise ValueError(f"context {tuple(context.shape)} incompatible with features {tuple(x.shape)}")
        d = C // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2)).reshape(V, H * W, self.heads, d).transpose(1, 2)
        ctx = self.ctx_norm(context).flatten(2).transpose(1, 2)
        k, v = self.kv(ctx).reshape(V, -1, 2, self.heads, d).permute(2, 0, 3, 1, 4)
        o = attention(q, k, v).transpose(1, 2).reshape(V, H * W, C)
        o = self.out(o).transpose(1, 2).reshape(V, C, H, W)
        return x + self.gate * o


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
