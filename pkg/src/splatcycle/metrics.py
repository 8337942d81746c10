"""Image-quality and multi-view consistency metrics."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose, pixel_grid

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PERCEPTUAL_SEED = 20240717


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x**2 / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def _gray(img: torch.Tensor) -> torch.Tensor:
    """Channel mean of (3, H, W) or pass-through of (H, W)."""
    img = img.double()
    return img.mean(dim=0) if img.ndim == 3 else img


def ssim(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) on the channel-mean image."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x, y = _gray(a)[None, None], _gray(b)[None, None]
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, x.dtype)
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean().item()


class RandomFeaturePyramid(nn.Module):
    """Three strided conv layers with frozen random weights from a fixed seed.

    A training-free perceptual distance: features are unit-normalized across
    channels and compared with a mean squared difference per layer. It is not
    LPIPS and its values are not comparable to LPIPS numbers.
    """

    def __init__(self, seed: int = PERCEPTUAL_SEED, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c_in = [], 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x.to(self.layers[0].weight.dtype) * 2 - 1
        out = []
        for conv in self.layers:
            h = F.relu(conv(h))
            out.append(h / (h.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt())
        return out

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image distance for (B, 3, H, W) batches in [0, 1]."""
        fa, fb = self.features(a), self.features(b)
        return sum(((x - y) ** 2).sum(dim=1).mean(dim=(-1, -2)) for x, y in zip(fa, fb))


_PYRAMIDS: dict = {}


def perceptual_network(dtype=torch.float32) -> RandomFeaturePyramid:
    if dtype not in _PYRAMIDS:
        _PYRAMIDS[dtype] = RandomFeaturePyramid().to(dtype)
    return _PYRAMIDS[dtype]


def perceptual_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable distance; (3, H, W) inputs give a scalar, (B, 3, H, W) a vector."""
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    d = perceptual_network(a.dtype)(a, b)
    return d[0] if single else d


def _sample(img: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (C, H, W) at (P, 2) pixel coordinates; returns (P, C)."""
    C, H, W = img.shape
    grid = torch.stack([uv[:, 0] / W * 2 - 1, uv[:, 1] / H * 2 - 1], -1)[None, None].to(img.dtype)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0, :, 0].T


def consistency_error(
    views: torch.Tensor,
    cameras: Sequence[CameraPose],
    depths: torch.Tensor,
    masks: torch.Tensor,
    depth_tolerance: float = 0.08,
    mask_threshold: float = 0.5,
) -> Optional[float]:
    """Mean absolute color difference between each view's foreground pixels and
    their depth-guided reprojections into every other view.

    ``depths``/``masks`` (V, H, W) describe the shared geometry (normally the
    ground-truth renders). A pixel pair counts when the point lands inside the
    other image, on its foreground, and agrees with its depth within
    ``depth_tolerance``. Returns None when no pair is co-visible.
    """
    V = views.shape[0]
    if V < 2:
        return None
    total, count = 0.0, 0
    views = views.double()
    depths = depths.double()
    masks = masks.double()
    for i in range(V):
        cam_i = cameras[i]
        H, W = cam_i.resolution
        uv = pixel_grid(H, W).reshape(-1, 2)
        fg = masks[i].reshape(-1) > mask_threshold
        if not bool(fg.any()):
            continue
        z = depths[i].reshape(-1)[fg]
        uv_i = uv[fg]
        cx, cy = cam_i.principal_point
        p_cam = torch.stack([(uv_i[:, 0] - cx) / cam_i.focal * z, (uv_i[:, 1] - cy) / cam_i.focal * z, z], -1)
        p_world = (p_cam - cam_i.translation) @ cam_i.rotation
        colors_i = views[i].reshape(3, -1)[:, fg].T
        for j in range(V):
            if j == i:
                continue
            cam_j = cameras[j]
            q = p_world @ cam_j.rotation.T + cam_j.translation
            zj = q[:, 2]
            front = zj > 1e-6
            u = cam_j.focal * q[:, 0] / zj.clamp_min(1e-6) + cam_j.principal_point[0]
            v = cam_j.focal * q[:, 1] / zj.clamp_min(1e-6) + cam_j.principal_point[1]
            Hj, Wj = cam_j.resolution
            inside = front & (u >= 0.5) & (u <= Wj - 0.5) & (v >= 0.5) & (v <= Hj - 0.5)
            if not bool(inside.any()):
                continue
            uvj = torch.stack([u, v], -1)[inside]
            mj = _sample(masks[j][None], uvj)[:, 0]
            dj = _sample(depths[j][None], uvj)[:, 0]
            ok = (mj > mask_threshold) & ((dj - zj[inside]).abs() < depth_tolerance)
            if not bool(ok.any()):
                continue
            cj = _sample(views[j], uvj[ok])
            diff = (colors_i[inside][ok] - cj).abs().mean(dim=1)
            total += diff.sum().item()
            count += int(ok.sum())
    return None if count == 0 else total / count


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]
    perceptual: list[float]
    consistency: Optional[float] = None
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return sum(self.psnr) / len(self.psnr)

    @property
    def mean_ssim(self) -> float:
        return sum(self.ssim) / len(self.ssim)

    @property
    def mean_perceptual(self) -> float:
        return sum(self.perceptual) / len(self.perceptual)

    def summary(self) -> dict:
        # CLIP similarity and contextual distance need pretrained encoders; they stay absent
        out = {
            "num_views": len(self.psnr),
            "psnr": f"{self.mean_psnr:.6f}",
            "ssim": f"{self.mean_ssim:.6f}",
            "perceptual": f"{self.mean_perceptual:.6f}",
            "consistency": "absent" if self.consistency is None else f"{self.consistency:.6f}",
            "seed": "" if self.seed is None else self.seed,
            "config_hash": self.config_hash or "",
        }
        out.update(self.extra)
        return out

    def rows(self) -> list[dict]:
        return [{"view": i, "psnr": f"{p:.6f}", "ssim": f"{s:.6f}", "perceptual": f"{d:.6f}"}
                for i, (p, s, d) in enumerate(zip(self.psnr, self.ssim, self.perceptual))]

    def write(self, directory, stem: str = "eval") -> tuple:
        import csv
        from pathlib import Path

        from .io import write_kv

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_kv(d / f"{stem}.txt", self.summary())
        with open(d / f"{stem}_views.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim", "perceptual"])
            writer.writeheader()
            writer.writerows(self.rows())
        return d / f"{stem}.txt", d / f"{stem}_views.csv"


def evaluate_views(pred: torch.Tensor, gt: torch.Tensor, **meta) -> EvalReport:
    """Per-view metrics for (V, 3, H, W) predictions against ground truth."""
    p, s, d = [], [], []
    with torch.no_grad():
        for a, b in zip(pred, gt):
            p.append(psnr(a.clamp(0, 1), b))
            s.append(ssim(a.clamp(0, 1), b))
            d.append(perceptual_distance(a.float(), b.float()).item())
    return EvalReport(p, s, d, **meta)


def config_hash(values: dict) -> str:
    text = "\n".join(f"{k}={values[k]}" for k in sorted(values))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
