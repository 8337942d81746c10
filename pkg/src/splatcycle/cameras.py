"""Pinhole cameras (OpenCV axes: x right, y down, z forward) and Plücker rays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class CameraPose:
    world_to_camera: torch.Tensor  # 4x4 rigid transform
    focal: float
    principal_point: tuple[float, float]  # (cx, cy) in pixels
    resolution: tuple[int, int]  # (H, W)

    def __post_init__(self):
        w2c = torch.as_tensor(self.world_to_camera, dtype=torch.float64)
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        object.__setattr__(self, "world_to_camera", w2c)
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        R = w2c[:3, :3]
        if not torch.allclose(R @ R.T, torch.eye(3, dtype=torch.float64), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")
        if abs(torch.linalg.det(R).item() - 1.0) > 1e-6:
            raise ValueError("rotation block must have det +1")

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]

    def scaled(self, factor: float) -> "CameraPose":
        """Same pose with intrinsics for an image resized by ``factor``."""
        H, W = self.resolution
        cx, cy = self.principal_point
        return CameraPose(
            self.world_to_camera,
            self.focal * factor,
            (cx * factor, cy * factor),
            (int(round(H * factor)), int(round(W * factor))),
        )

    def transformed(self, rigid: torch.Tensor) -> "CameraPose":
        """The camera after moving the world by ``rigid`` (4x4)."""
        rigid = torch.as_tensor(rigid, dtype=torch.float64)
        return CameraPose(self.world_to_camera @ torch.linalg.inv(rigid), self.focal,
                          self.principal_point, self.resolution)


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """World-to-camera matrix for a camera at ``position`` facing ``target``."""
    pos = torch.as_tensor(position, dtype=torch.float64)
    forward = torch.as_tensor(target, dtype=torch.float64) - pos
    forward = forward / forward.norm()
    up = torch.as_tensor(up, dtype=torch.float64)
    right = torch.linalg.cross(forward, up)
    if right.norm() < 1e-9:
        # looking straight along up; any perpendicular will do
        right = torch.linalg.cross(forward, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
    right = right / right.norm()
    down = torch.linalg.cross(forward, right)
    R = torch.stack([right, down, forward])
    w2c = torch.eye(4, dtype=torch.float64)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ pos
    return w2c


def focal_from_fov(fov_deg: float, width: int) -> float:
    return 0.5 * width / math.tan(math.radians(fov_deg) / 2)


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float = 1.5,
    fov_deg: float = 60.0,
    resolution: tuple[int, int] = (64, 64),
) -> CameraPose:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    pos = (radius * math.cos(el) * math.cos(az), radius * math.cos(el) * math.sin(az), radius * math.sin(el))
    H, W = resolution
    return CameraPose(look_at(pos), focal_from_fov(fov_deg, W), (W / 2, H / 2), (H, W))


def pixel_grid(H: int, W: int, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 2) pixel-center coordinates (u, v)."""
    v, u = torch.meshgrid(torch.arange(H, dtype=dtype) + 0.5, torch.arange(W, dtype=dtype) + 0.5, indexing="ij")
    return torch.stack([u, v], dim=-1)


def camera_rays(cam: CameraPose, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel world-space ray origins and unit directions, each (H, W, 3)."""
    H, W = cam.resolution
    cx, cy = cam.principal_point
    uv = pixel_grid(H, W)
    d_cam = torch.stack([(uv[..., 0] - cx) / cam.focal, (uv[..., 1] - cy) / cam.focal, torch.ones(H, W, dtype=torch.float64)], -1)
    d_world = d_cam @ cam.rotation  # row-vector form of R^T d
    d_world = d_world / d_world.norm(dim=-1, keepdim=True)
    origin = cam.center.expand(H, W, 3)
    return origin.to(dtype), d_world.to(dtype)


def plucker_rays(cam: CameraPose, dtype=torch.float32) -> torch.Tensor:
    """(6, H, W) ray embedding: unit direction then moment ``o x d``."""
    o, d = camera_rays(cam)
    m = torch.linalg.cross(o, d, dim=-1)
    return torch.cat([d, m], dim=-1).permute(2, 0, 1).to(dtype)
