"""Small conditional U-Net that predicts per-view noise.

Views travel through the network as the batch dimension with shared weights.
The only exchange between views is the optional reference-view K/V injection
inside self-attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Downsample, ResBlock, SelfAttention, Upsample, groups_for, sinusoidal_embedding
from .scheduler import GuidanceConfig, cfg_combine

NULL_ID = 0

Tokens = Union[Sequence[int], torch.Tensor]


@dataclass
class DenoiserConfig:
    image_channels: int = 3
    base_width: int = 64
    vocab_size: int = 10
    num_steps: int = 1000
    heads: int = 4

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_width

    @property
    def feature_channels(self) -> dict[int, int]:
        """Channels of the decoder features per resolution level (level k is H / 2**k)."""
        return {0: self.base_width, 1: 2 * self.base_width, 2: 2 * self.base_width}


@dataclass
class MultiViewBatch:
    views: torch.Tensor  # (V, C, H, W), nominally in [-1, 1]
    per_view_t: torch.Tensor  # (V,) integer timesteps
    conditioning: Union[Tokens, list]  # one token sequence, or one per view
    cameras: Optional[list] = None
    reference_index: int = 0

    def __post_init__(self):
        V = self.views.shape[0]
        if V < 2:
            raise ValueError("a multi-view batch needs at least 2 views")
        self.per_view_t = torch.as_tensor(self.per_view_t, dtype=torch.long).reshape(-1)
        if self.per_view_t.shape[0] != V:
            raise ValueError(f"{self.per_view_t.shape[0]} timesteps for {V} views")
        if self.cameras is not None and len(self.cameras) != V:
            raise ValueError(f"{len(self.cameras)} cameras for {V} views")
        if not 0 <= self.reference_index < V:
            raise ValueError("reference_index out of range")

    def per_view_tokens(self) -> list[list[int]]:
        V = self.views.shape[0]
        cond = self.conditioning
        if isinstance(cond, torch.Tensor):
            cond = cond.tolist()
        if len(cond) and isinstance(cond[0], (list, tuple)):
            if len(cond) != V:
                raise ValueError(f"{len(cond)} prompts for {V} views")
            return [list(c) for c in cond]
        return [list(cond) for _ in range(V)]


class Denoiser(nn.Module):
    """Epsilon-prediction U-Net: 3 levels, attention at the two coarsest."""

    def __init__(self, config: DenoiserConfig | None = None, **overrides):
        super().__init__()
        cfg = config or DenoiserConfig(**overrides)
        self.config = cfg
        b, e = cfg.base_width, cfg.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(b, e), nn.SiLU(), nn.Linear(e, e))
        self.token_embed = nn.Embedding(cfg.vocab_size, e)

        self.conv_in = nn.Conv2d(cfg.image_channels, b, 3, padding=1)
        self.enc0 = ResBlock(b, b, e)
        self.down0 = Downsample(b)
        self.enc1 = ResBlock(b, 2 * b, e)
        self.enc1_attn = SelfAttention(2 * b, cfg.heads)
        self.down1 = Downsample(2 * b)
        self.enc2 = ResBlock(2 * b, 2 * b, e)
        self.enc2_attn = SelfAttention(2 * b, cfg.heads)

        self.mid1 = ResBlock(2 * b, 2 * b, e)
        self.mid_attn = SelfAttention(2 * b, cfg.heads)
        self.mid2 = ResBlock(2 * b, 2 * b, e)

        self.dec2 = ResBlock(4 * b, 2 * b, e)
        self.dec2_attn = SelfAttention(2 * b, cfg.heads)
        self.up2 = Upsample(2 * b)
        self.dec1 = ResBlock(4 * b, 2 * b, e)
        self.dec1_attn = SelfAttention(2 * b, cfg.heads)
        self.up1 = Upsample(2 * b)
        self.dec0 = ResBlock(3 * b, b, e)

        self.norm_out = nn.GroupNorm(groups_for(b), b)
        self.conv_out = nn.Conv2d(b, cfg.image_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def per_view_time_embed(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if bool((t < 0).any()) or bool((t > self.config.num_steps).any()):
            raise ValueError(f"timestep outside [0, {self.config.num_steps}]")
        return self.time_mlp(sinusoidal_embedding(t, self.config.base_width).to(self.dtype))

    def embed_conditioning(self, tokens: Tokens) -> torch.Tensor:
        """Mean-pooled token embedding; an empty sequence means NULL."""
        ids = torch.as_tensor(list(tokens) if not isinstance(tokens, torch.Tensor) else tokens, dtype=torch.long).reshape(-1)
        if ids.numel() == 0:
            ids = torch.tensor([NULL_ID])
        if bool((ids < 0).any()) or bool((ids >= self.config.vocab_size).any()):
            raise ValueError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return self.token_embed(ids).mean(dim=0)

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        ref_index: Optional[int] = None,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """``x`` (V, C, H, W), ``t`` (V,), ``cond`` (V, emb_dim) pooled conditioning.

        Returns the noise prediction and decoder features keyed by level.
        """
        emb = self.per_view_time_embed(t) + cond
        h0 = self.enc0(self.conv_in(x), emb)
        h1 = self.enc1_attn(self.enc1(self.down0(h0), emb), ref_index)
        h2 = self.enc2_attn(self.enc2(self.down1(h1), emb), ref_index)
        m = self.mid2(self.mid_attn(self.mid1(h2, emb), ref_index), emb)
        d2 = self.dec2_attn(self.dec2(torch.cat([m, h2], 1), emb), ref_index)
        d1 = self.dec1_attn(self.dec1(torch.cat([self.up2(d2), h1], 1), emb), ref_index)
        d0 = self.dec0(torch.cat([self.up1(d1), h0], 1), emb)
        eps = self.conv_out(F.silu(self.norm_out(d0)))
        return eps, {0: d0, 1: d1, 2: d2}

    def conditioning_tensor(self, per_view_tokens: list[list[int]]) -> torch.Tensor:
        return torch.stack([self.embed_conditioning(tok) for tok in per_view_tokens])

    def predict_noise(
        self,
        batch: MultiViewBatch,
        guidance: GuidanceConfig = GuidanceConfig(scale=1.0),
        ref_injection: bool = True,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Per-view noise prediction, optionally classifier-free guided.

        Features always come from the conditional pass.
        """
        ref = batch.reference_index if ref_injection else None
        x = batch.views.to(self.dtype)
        cond = self.conditioning_tensor(batch.per_view_tokens())
        eps_c, feats = self(x, batch.per_view_t, cond, ref)
        if guidance.scale == 1.0:
            return eps_c, feats
        null = self.embed_conditioning([guidance.null_id]).expand_as(cond)
        eps_u, _ = self(x, batch.per_view_t, null, ref)
        return cfg_combine(eps_u, eps_c, guidance.scale), feats

    def config_dict(self) -> dict:
        return asdict(self.config)
