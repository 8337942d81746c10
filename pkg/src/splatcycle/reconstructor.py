"""Feed-forward reconstruction of pixel-aligned Gaussians from a few views.

An asymmetric U-Net takes RGB plus Plücker rays at ``H x W`` and emits one
Gaussian per pixel of an ``H/2 x W/2`` map for every view. Timestep
conditioning enters through zero-initialized projections in every residual
block, and denoiser decoder features through zero-gated cross-attention at the
two coarsest encoder levels. Both paths are exact no-ops at initialization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose, camera_rays, plucker_rays
from .layers import (Downsample, GatedCrossAttention, MultiViewAttention, ResBlock, Upsample, groups_for,
                     sinusoidal_embedding)
from .splat import GaussianCloud

RAW_CHANNELS = 15  # depth 1, offset 3, scale 3, rotation 4, opacity 1, color 3
IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass
class ReconstructorConfig:
    base_width: int = 64
    time_dim: int = 256
    context_channels: tuple = (128, 128)  # denoiser feature channels at levels 1 and 2
    heads: int = 4
    num_steps: int = 1000
    near: float = 0.5
    far: float = 2.5
    offset_scale: float = 0.1
    scale_min: float = 0.005
    scale_max: float = 0.1


class Reconstructor(nn.Module):
    def __init__(self, config: ReconstructorConfig | None = None, **overrides):
        super().__init__()
        cfg = config or ReconstructorConfig(**overrides)
        cfg.context_channels = tuple(cfg.context_channels)
        self.config = cfg
        b, e = cfg.base_width, cfg.time_dim
        ctx1, ctx2 = cfg.context_channels

        self.conv_in = nn.Conv2d(9, b, 3, padding=1)
        self.enc0 = ResBlock(b, b, e, zero_time=True)
        self.down0 = Downsample(b)
        self.enc1 = ResBlock(b, 2 * b, e, zero_time=True)
        self.cross1 = GatedCrossAttention(2 * b, ctx1, cfg.heads)
        self.down1 = Downsample(2 * b)
        self.enc2 = ResBlock(2 * b, 2 * b, e, zero_time=True)
        self.cross2 = GatedCrossAttention(2 * b, ctx2, cfg.heads)
        self.enc2_attn = MultiViewAttention(2 * b, cfg.heads)

        self.mid = ResBlock(2 * b, 2 * b, e, zero_time=True)
        self.mid_attn = MultiViewAttention(2 * b, cfg.heads)

        self.up = Upsample(2 * b)
        self.dec1 = ResBlock(4 * b, 2 * b, e, zero_time=True)
        self.dec1_attn = MultiViewAttention(2 * b, cfg.heads)
        self.norm_out = nn.GroupNorm(groups_for(2 * b), 2 * b)
        self.head = nn.Conv2d(2 * b, RAW_CHANNELS, 1)
        nn.init.normal_(self.head.weight, std=1e-3)
        nn.init.zeros_(self.head.bias)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def cross_attention_layers(self) -> list[GatedCrossAttention]:
        return [self.cross1, self.cross2]

    def blocks(self) -> list[ResBlock]:
        return [self.enc0, self.enc1, self.enc2, self.mid, self.dec1]

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if bool((t < 0).any()) or bool((t > self.config.num_steps).any()):
            raise ValueError(f"timestep outside [0, {self.config.num_steps}]")
        return sinusoidal_embedding(t, self.config.time_dim).to(self.dtype)

    def feature_interact(self, h: torch.Tensor, level: int, features: Optional[dict]) -> torch.Tensor:
        ctx = None if features is None else features.get(level)
        if features is not None and ctx is None:
            raise ValueError(f"denoiser features lack level {level}")
        layer = {1: self.cross1, 2: self.cross2}[level]
        return layer(h, None if ctx is None else ctx.to(h.dtype))

    def raw_head(
        self,
        views: torch.Tensor,
        cameras: Sequence[CameraPose],
        t: torch.Tensor,
        features: Optional[dict] = None,
        t_emb: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(V, 15, H/2, W/2) pre-activation Gaussian parameters."""
        V = views.shape[0]
        if len(cameras) != V:
            raise ValueError(f"{len(cameras)} cameras for {V} views")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(V)
        emb = self.time_embedding(t) if t_emb is None else t_emb.to(self.dtype)
        rays = torch.stack([plucker_rays(c, self.dtype) for c in cameras])
        x = torch.cat([views.to(self.dtype) * 2 - 1, rays], dim=1)

        h0 = self.enc0(self.conv_in(x), emb)
        h1 = self.feature_interact(self.enc1(self.down0(h0), emb), 1, features)
        h2 = self.enc2(self.down1(h1), emb)
        h2 = self.enc2_attn(self.feature_interact(h2, 2, features))
        m = self.mid_attn(self.mid(h2, emb))
        d1 = self.dec1_attn(self.dec1(torch.cat([self.up(m), h1], 1), emb))
        return self.head(F.silu(self.norm_out(d1)))

    def forward(self, views, cameras, t, features=None, t_emb=None) -> GaussianCloud:
        return self.reconstruct(views, cameras, t, features, t_emb)

    def reconstruct(
        self,
        views: torch.Tensor,
        cameras: Sequence[CameraPose],
        t,
        features: Optional[dict] = None,
        t_emb: Optional[torch.Tensor] = None,
    ) -> GaussianCloud:
        """Views in [0, 1], shape (V, 3, H, W); returns V * H/2 * W/2 Gaussians,
        view-major then row-major."""
        raw = self.raw_head(views, cameras, t, features, t_emb)
        h, w = raw.shape[-2:]
        origins, dirs = [], []
        for cam in cameras:
            o, d = camera_rays(cam.scaled(h / cam.height), self.dtype)
            origins.append(o)
            dirs.append(d)
        return activate_gaussians(raw, torch.stack(origins), torch.stack(dirs), self.config)


def activate_gaussians(raw: torch.Tensor, origins: torch.Tensor, dirs: torch.Tensor,
                       config: ReconstructorConfig = ReconstructorConfig()) -> GaussianCloud:
    """Map (V, 15, h, w) raw head outputs and (V, h, w, 3) rays to a cloud."""
    r = raw.permute(0, 2, 3, 1).reshape(-1, RAW_CHANNELS)
    o = origins.reshape(-1, 3).to(r.dtype)
    d = dirs.reshape(-1, 3).to(r.dtype)
    depth = config.near + (config.far - config.near) * torch.sigmoid(r[:, :1])
    positions = o + depth * d + config.offset_scale * torch.tanh(r[:, 1:4])
    scales = config.scale_min + (config.scale_max - config.scale_min) * torch.sigmoid(r[:, 4:7])
    quat = r[:, 7:11] + torch.tensor(IDENTITY_QUAT, dtype=r.dtype)
    # a raw quaternion of exactly -identity would have zero norm
    quat = quat / quat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    quat = torch.where(quat.norm(dim=-1, keepdim=True) < 0.5, torch.tensor(IDENTITY_QUAT, dtype=r.dtype), quat)
    opacities = torch.sigmoid(r[:, 11])
    colors = torch.sigmoid(r[:, 12:15])
    return GaussianCloud(positions, scales, quat, opacities, colors)


def config_dict(model: Reconstructor) -> dict:
    return asdict(model.config)
