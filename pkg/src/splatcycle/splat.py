"""Differentiable 3D Gaussian splatting.

Each Gaussian is projected with the EWA linearization, sorted by camera depth
and alpha-composited front to back. There is no tiling: every pixel visits
every non-culled Gaussian, vectorized over a pixel chunk. Everything is plain
torch, so autograd provides gradients for all five attributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .cameras import CameraPose, pixel_grid

LOW_PASS = 0.3
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
NEAR_PLANE = 0.2


@dataclass
class GaussianCloud:
    positions: torch.Tensor  # (N, 3)
    scales: torch.Tensor  # (N, 3), > 0
    rotations: torch.Tensor  # (N, 4) unit quaternions, (w, x, y, z)
    opacities: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3) RGB in [0, 1]

    ATTRIBUTES = ("positions", "scales", "rotations", "opacities", "colors")

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls, dtype=torch.float32) -> "GaussianCloud":
        return cls(torch.zeros(0, 3, dtype=dtype), torch.ones(0, 3, dtype=dtype),
                   torch.zeros(0, 4, dtype=dtype), torch.zeros(0, dtype=dtype), torch.zeros(0, 3, dtype=dtype))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.ATTRIBUTES}

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "GaussianCloud":
        return GaussianCloud(**{k: fn(v) for k, v in self.tensors().items()})

    def to(self, dtype) -> "GaussianCloud":
        return self.map(lambda x: x.to(dtype))

    def detach(self) -> "GaussianCloud":
        return self.map(lambda x: x.detach())

    def select(self, index) -> "GaussianCloud":
        return self.map(lambda x: x[index])

    @staticmethod
    def cat(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        return GaussianCloud(**{k: torch.cat([getattr(c, k) for c in clouds]) for k in GaussianCloud.ATTRIBUTES})

    def check(self, tol: float = 1e-6):
        """Raise ``ValueError`` if any attribute invariant is violated."""
        n = len(self)
        shapes = {"positions": (n, 3), "scales": (n, 3), "rotations": (n, 4), "opacities": (n,), "colors": (n, 3)}
        for name, shape in shapes.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if n == 0:
            return
        if not bool(torch.isfinite(torch.cat([t.reshape(-1) for t in self.tensors().values()])).all()):
            raise ValueError("non-finite Gaussian attribute")
        if bool((self.scales <= 0).any()):
            raise ValueError("scales must be positive")
        if bool(((self.rotations.norm(dim=-1) - 1).abs() > tol).any()):
            raise ValueError("rotations must be unit quaternions")
        for name in ("opacities", "colors"):
            v = getattr(self, name)
            if bool((v < 0).any()) or bool((v > 1).any()):
                raise ValueError(f"{name} must lie in [0, 1]")

    def transformed(self, rigid: torch.Tensor) -> "GaussianCloud":
        """Apply a rigid world transform (4x4) to positions and orientations."""
        rigid = torch.as_tensor(rigid, dtype=self.positions.dtype)
        R, t = rigid[:3, :3], rigid[:3, 3]
        q = matrix_to_quaternion(R.to(torch.float64)).to(self.rotations.dtype)
        return GaussianCloud(self.positions @ R.T + t, self.scales, quaternion_multiply(q, self.rotations),
                             self.opacities, self.colors)


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    alpha_mask: torch.Tensor  # (H, W)
    depth: Optional[torch.Tensor] = None  # (H, W) expected camera z, 0 where empty


@dataclass
class Projection:
    means2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2), low-pass dilation included
    depths: torch.Tensor  # (N,) camera-space z
    culled: torch.Tensor  # (N,) bool, True for Gaussians at or behind the near plane


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def matrix_to_quaternion(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    m = R
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = torch.sqrt(tr + 1.0) * 2
        q = torch.stack([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = torch.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = torch.stack([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = torch.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = torch.stack([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = torch.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = torch.stack([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / q.norm()


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def covariance_3d(scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """``R diag(s^2) R^T`` for (..., 3) scales and (..., 4) quaternions."""
    norms = rotations.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm quaternion")
    R = quaternion_to_matrix(rotations)
    M = R * scales.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def project(cloud: GaussianCloud, cam: CameraPose, low_pass: float = LOW_PASS, near: float = NEAR_PLANE) -> Projection:
    dtype = cloud.positions.dtype
    W = cam.rotation.to(dtype)
    p_cam = cloud.positions @ W.T + cam.translation.to(dtype)
    x, y, z = p_cam.unbind(-1)
    culled = z <= near
    # keep the Jacobian finite for culled entries; they are dropped downstream
    z_safe = torch.where(culled, torch.ones_like(z), z)
    f = cam.focal
    cx, cy = cam.principal_point
    means2d = torch.stack([f * x / z_safe + cx, f * y / z_safe + cy], dim=-1)
    zeros = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([f / z_safe, zeros, -f * x / z_safe**2], dim=-1),
        torch.stack([zeros, f / z_safe, -f * y / z_safe**2], dim=-1),
    ], dim=-2)
    T = J @ W
    cov = T @ covariance_3d(cloud.scales, cloud.rotations) @ T.transpose(-1, -2)
    cov = cov + low_pass * torch.eye(2, dtype=dtype)
    return Projection(means2d, cov, z, culled)


def render(
    cloud: GaussianCloud,
    cam: CameraPose,
    background=(1.0, 1.0, 1.0),
    *,
    min_alpha: float = MIN_ALPHA,
    min_transmittance: float = MIN_TRANSMITTANCE,
    low_pass: float = LOW_PASS,
    near: float = NEAR_PLANE,
    max_chunk: int = 2_000_000,
) -> RenderOutput:
    """Alpha-composite ``cloud`` as seen from ``cam``.

    ``min_alpha`` and ``min_transmittance`` are the per-pixel contribution
    cutoff and the early-termination threshold; pass 0 to get the smooth
    compositing function (used for finite-difference checks).
    """
    H, W = cam.resolution
    dtype = cloud.positions.dtype
    bg = torch.as_tensor(background, dtype=dtype)
    if len(cloud) == 0:
        return RenderOutput(bg.expand(H, W, 3).clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype))

    proj = project(cloud, cam, low_pass=low_pass, near=near)
    keep = (~proj.culled).nonzero().squeeze(-1)
    if keep.numel() == 0:
        return RenderOutput(bg.expand(H, W, 3).clone(), torch.zeros(H, W, dtype=dtype), torch.zeros(H, W, dtype=dtype))
    depths = proj.depths[keep]
    order = keep[torch.argsort(depths.detach(), stable=True)]

    means = proj.means2d[order]
    cov = proj.cov2d[order]
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    A, B, C = c / det, -b / det, a / det
    mx, my = means[:, 0], means[:, 1]
    # log alpha' = log(opacity) - q/2 is a quadratic in pixel coordinates, so
    # expanding it turns the per-pair evaluation into one matmul
    log_opac = torch.log(cloud.opacities[order].clamp_min(1e-30))
    coeffs = torch.stack([
        -0.5 * A, -B, -0.5 * C,
        A * mx + B * my, B * mx + C * my,
        log_opac - 0.5 * (A * mx * mx + 2 * B * mx * my + C * my * my),
    ])  # (6, N)
    attrs = torch.cat([cloud.colors[order], proj.depths[order, None]], dim=1)  # (N, 4)

    pix = pixel_grid(H, W, dtype).reshape(-1, 2)
    u, v = pix[:, 0], pix[:, 1]
    feats = torch.stack([u * u, u * v, v * v, u, v, torch.ones_like(u)], dim=1)  # (P, 6)
    n = order.numel()
    chunk = max(1, max_chunk // n)
    rgb, alpha, depth = [], [], []
    for start in range(0, pix.shape[0], chunk):
        # the floor keeps exp out of denormals (10x slower); exp(-60) is far below any cutoff
        a_px = torch.exp((feats[start:start + chunk] @ coeffs).clamp_min(-60.0))
        if min_alpha > 0:
            a_px = torch.where(a_px < min_alpha, torch.zeros_like(a_px), a_px)
        trans = torch.cumprod(torch.cat([torch.ones_like(a_px[:, :1]), 1 - a_px[:, :-1]], dim=1), dim=1)
        w = a_px * trans
        if min_transmittance > 0:
            # transmittance only decreases, so this keeps a depth-ordered prefix
            w = w * (trans >= min_transmittance).to(dtype)
        acc = w.sum(dim=1)
        mix = w @ attrs
        rgb.append(mix[:, :3] + (1 - acc)[:, None] * bg)
        alpha.append(acc)
        depth.append(mix[:, 3] / acc.clamp_min(1e-10))
    image = torch.cat(rgb).reshape(H, W, 3)
    mask = torch.cat(alpha).reshape(H, W)
    depth_map = torch.cat(depth).reshape(H, W)
    return RenderOutput(image, mask, depth_map)


def render_batch(cloud: GaussianCloud, cams, background=(1.0, 1.0, 1.0), **kw) -> tuple[torch.Tensor, torch.Tensor]:
    """Render several cameras; returns ``(V, 3, H, W)`` images and ``(V, H, W)`` masks."""
    outs = [render(cloud, cam, background, **kw) for cam in cams]
    return torch.stack([o.image.permute(2, 0, 1) for o in outs]), torch.stack([o.alpha_mask for o in outs])


def render_gradcheck(
    cloud: GaussianCloud,
    cam: CameraPose,
    loss: Callable[[RenderOutput], torch.Tensor],
    step: float = 1e-4,
    background=(1.0, 1.0, 1.0),
) -> float:
    """Worst relative error between autograd and central-difference gradients.

    Runs in float64 with the contribution cutoff and early termination off,
    since both are step functions a finite difference can straddle. Opacity
    entries within ``step`` of 0 or 1 are skipped. Per attribute the error is
    ``max|g_auto - g_fd| / max|g_fd|``.
    """
    base = cloud.to(torch.float64).detach()
    params = {k: v.clone().requires_grad_(True) for k, v in base.tensors().items()}

    def evaluate(attrs):
        out = render(GaussianCloud(**attrs), cam, background, min_alpha=0.0, min_transmittance=0.0)
        return loss(out)

    value = evaluate(params)
    if value.requires_grad:
        grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    else:
        grads = [None] * len(params)
    worst = 0.0
    with torch.no_grad():
        for (name, tensor), g in zip(params.items(), grads):
            g = torch.zeros_like(tensor) if g is None else g
            fd = torch.zeros_like(tensor)
            flat = tensor.detach().reshape(-1)
            skip = torch.zeros_like(flat, dtype=torch.bool)
            if name == "opacities":
                skip = (flat < step) | (flat > 1 - step)
            for i in range(flat.numel()):
                if skip[i]:
                    continue
                plus = {k: v.detach().clone() for k, v in params.items()}
                minus = {k: v.detach().clone() for k, v in params.items()}
                plus[name].view(-1)[i] += step
                minus[name].view(-1)[i] -= step
                fd.view(-1)[i] = (evaluate(plus) - evaluate(minus)) / (2 * step)
            g = g.reshape(-1).masked_fill(skip, 0.0)
            fd = fd.reshape(-1)
            scale = fd.abs().max().item() if fd.numel() else 0.0
            err = (g - fd).abs().max().item() if fd.numel() else 0.0
            if scale > 1e-8:
                worst = max(worst, err / scale)
            else:
                worst = max(worst, err / 1e-8)
    return worst
