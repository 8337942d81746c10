"""Procedural multi-view scenes.

A scene is itself a small Gaussian cloud built from 1-5 colored primitives, so
ground truth renders come from the same splatting code the models train
against. Every stage is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import CameraPose, orbit_camera
from .denoiser import NULL_ID
from .splat import GaussianCloud, render

COLORS = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.92, 0.85, 0.15),
    "purple": (0.6, 0.2, 0.75),
    "orange": (0.95, 0.55, 0.1),
}
SHAPES = ("blob", "ellipsoid_cluster", "ring")

# id 0 is NULL; colors then shapes
VOCAB = ["<null>"] + list(COLORS) + list(SHAPES)
TOKEN_ID = {name: i for i, name in enumerate(VOCAB)}
assert TOKEN_ID["<null>"] == NULL_ID

NUM_VIEWS = 36
NUM_INPUT = 4
NUM_SUPERVISION = 8
ORBIT_RADIUS = 1.5
FOV_DEG = 60.0
INPUT_ELEVATION = (-5.0, 5.0)
OTHER_ELEVATION = (-15.0, 30.0)
MIN_INPUT_SEPARATION_DEG = 60.0
SCENE_RADIUS = 0.95
GAUSSIANS_PER_PRIMITIVE = 24


@dataclass
class Primitive:
    shape: str
    color: str
    center: tuple
    size: float


@dataclass
class SceneSpec:
    seed: int
    primitives: list[Primitive]

    @property
    def labels(self) -> list[tuple[str, str]]:
        return [(p.color, p.shape) for p in self.primitives]

    @property
    def tokens(self) -> list[int]:
        """Caption tokens: every primitive's color then shape, in order."""
        out = []
        for color, shape in self.labels:
            out += [TOKEN_ID[color], TOKEN_ID[shape]]
        return out


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _primitive_points(shape: str, size: float, rng: np.random.Generator) -> np.ndarray:
    n = GAUSSIANS_PER_PRIMITIVE
    if shape == "blob":
        pts = rng.normal(size=(n, 3)) * size * 0.35
    elif shape == "ellipsoid_cluster":
        axes = size * rng.uniform(0.3, 1.0, size=3)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * axes * rng.uniform(0.6, 1.0, size=(n, 1))
    elif shape == "ring":
        theta = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi)
        pts = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], 1) * size
        pts += rng.normal(size=(n, 3)) * size * 0.05
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return pts @ _random_rotation(rng).T


def generate_scene(seed: int) -> tuple[SceneSpec, GaussianCloud]:
    rng = np.random.default_rng([seed, 0x5CE1E])
    count = int(rng.integers(1, 6))
    prims, clouds = [], []
    for _ in range(count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        center = rng.normal(size=3)
        center *= rng.uniform(0.0, 0.3) / max(np.linalg.norm(center), 1e-9)
        size = float(rng.uniform(0.12, 0.25))
        pts = center + _primitive_points(shape, size, rng)
        scales = rng.uniform(0.025, 0.06, size=(GAUSSIANS_PER_PRIMITIVE, 3))
        # pull any straggler inside the bounding sphere, including its 3-sigma extent
        limit = SCENE_RADIUS - 3 * scales.max(axis=1)
        norms = np.linalg.norm(pts, axis=1)
        pts *= np.minimum(1.0, limit / np.maximum(norms, 1e-12))[:, None]
        quats = rng.normal(size=(GAUSSIANS_PER_PRIMITIVE, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        base = np.array(COLORS[color])
        cols = np.clip(base + rng.normal(scale=0.04, size=(GAUSSIANS_PER_PRIMITIVE, 3)), 0, 1)
        opac = rng.uniform(0.8, 1.0, size=GAUSSIANS_PER_PRIMITIVE)
        prims.append(Primitive(shape, color, tuple(float(c) for c in center), size))
        clouds.append(GaussianCloud(*(torch.tensor(a, dtype=torch.float32) for a in (pts, scales, quats, opac, cols))))
    return SceneSpec(seed, prims), GaussianCloud.cat(clouds)


@dataclass
class ViewSet:
    azimuths: list[float]
    elevations: list[float]
    input_indices: list[int]
    supervision_indices: list[int]
    images: torch.Tensor  # (36, 3, H, W) in [0, 1]
    masks: torch.Tensor  # (36, H, W)
    depths: torch.Tensor  # (36, H, W)
    resolution: tuple[int, int]
    radius: float = ORBIT_RADIUS
    fov_deg: float = FOV_DEG

    @property
    def cameras(self) -> list[CameraPose]:
        return [orbit_camera(a, e, self.radius, self.fov_deg, self.resolution)
                for a, e in zip(self.azimuths, self.elevations)]

    def subset(self, indices):
        cams = self.cameras
        return self.images[indices], self.masks[indices], [cams[i] for i in indices]


def _circular_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def sample_orbit(seed: int) -> tuple[list[float], list[float], list[int], list[int]]:
    """Azimuths, elevations, input and supervision indices for one scene."""
    rng = np.random.default_rng([seed, 0x0B17])
    offset = float(rng.uniform(0, 10))
    azimuths = [offset + 10.0 * i for i in range(NUM_VIEWS)]
    while True:
        inputs = [int(i) for i in rng.choice(NUM_VIEWS, NUM_INPUT, replace=False)]
        if all(_circular_gap(azimuths[i], azimuths[j]) >= MIN_INPUT_SEPARATION_DEG
               for k, i in enumerate(inputs) for j in inputs[k + 1:]):
            break
    elevations = [float(rng.uniform(*OTHER_ELEVATION)) for _ in range(NUM_VIEWS)]
    for i in inputs:
        elevations[i] = float(rng.uniform(*INPUT_ELEVATION))
    rest = [i for i in range(NUM_VIEWS) if i not in inputs]
    supervision = sorted(int(i) for i in rng.choice(rest, NUM_SUPERVISION, replace=False))
    return azimuths, elevations, inputs, supervision


def render_viewset(cloud: GaussianCloud, seed: int, resolution=(64, 64), background=(1.0, 1.0, 1.0)) -> ViewSet:
    azimuths, elevations, inputs, supervision = sample_orbit(seed)
    images, masks, depths = [], [], []
    for a, e in zip(azimuths, elevations):
        out = render(cloud, orbit_camera(a, e, ORBIT_RADIUS, FOV_DEG, resolution), background)
        images.append(out.image.permute(2, 0, 1))
        masks.append(out.alpha_mask)
        depths.append(out.depth)
    return ViewSet(azimuths, elevations, inputs, supervision, torch.stack(images).clamp(0, 1),
                   torch.stack(masks), torch.stack(depths), tuple(resolution))


@dataclass
class PerturbConfig:
    hue: float = 0.0  # std of the per-view hue rotation, in turns of the color wheel
    brightness: float = 0.0  # std of the per-view additive brightness shift
    warp_px: float = 0.0  # peak displacement of the smooth warp, in pixels
    texture_noise: float = 0.0  # std of additive per-pixel noise
    exempt_reference: bool = True
    reference_index: int = 0

    def is_identity(self) -> bool:
        return self.hue == 0 and self.brightness == 0 and self.warp_px == 0 and self.texture_noise == 0


# RGB <-> YIQ; hue is the angle in the IQ plane
_YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=torch.float64)


def rotate_hue(image: torch.Tensor, turns: float) -> torch.Tensor:
    """Rotate the hue of a (3, H, W) image by ``turns`` of the color wheel."""
    theta = 2 * math.pi * turns
    c, s = math.cos(theta), math.sin(theta)
    rot = torch.tensor([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=torch.float64)
    M = (torch.linalg.inv(_YIQ) @ rot @ _YIQ).to(image.dtype)
    return torch.einsum("ij,jhw->ihw", M, image)


def _smooth_warp(image: torch.Tensor, amplitude: float, gen: torch.Generator) -> torch.Tensor:
    _, H, W = image.shape
    coarse = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    field = F.interpolate(coarse, size=(H, W), mode="bicubic", align_corners=True)[0]
    field = field * (amplitude / field.abs().max().clamp_min(1e-12))
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64), indexing="ij")
    gx = (xs + field[0] + 0.5) / W * 2 - 1
    gy = (ys + field[1] + 0.5) / H * 2 - 1
    grid = torch.stack([gx, gy], -1)[None].to(image.dtype)
    return F.grid_sample(image[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]


def perturb_views(views: torch.Tensor, config: PerturbConfig, seed: int = 0) -> torch.Tensor:
    """Independent per-view appearance and geometry perturbations of (V, 3, H, W) views in [0, 1]."""
    for name in ("hue", "brightness", "warp_px", "texture_noise"):
        if getattr(config, name) < 0:
            raise ValueError(f"{name} must be nonnegative")
    if config.is_identity():
        return views.clone()
    gen = torch.Generator().manual_seed(int(seed))
    out = []
    for i, img in enumerate(views):
        # draw every view's randomness even when exempt, so views are independent of the exemption
        z_hue, z_bright = torch.randn(2, generator=gen, dtype=torch.float64).tolist()
        warp_gen = torch.Generator().manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        noise = torch.randn(img.shape, generator=gen, dtype=torch.float64).to(img.dtype)
        if config.exempt_reference and i == config.reference_index:
            out.append(img.clone())
            continue
        x = img
        if config.hue > 0:
            x = rotate_hue(x, config.hue * z_hue)
        if config.brightness > 0:
            x = x + config.brightness * z_bright
        if config.warp_px > 0:
            x = _smooth_warp(x, config.warp_px, warp_gen)
        if config.texture_noise > 0:
            x = x + config.texture_noise * noise
        out.append(x.clamp(0, 1))
    return torch.stack(out)


@dataclass
class SceneSample:
    """One training example: 4 input views plus 8 supervision views."""

    seed: int
    tokens: list[int]
    input_images: torch.Tensor  # (4, 3, H, W)
    input_masks: torch.Tensor
    input_cameras: list
    supervision_images: torch.Tensor  # (8, 3, H, W)
    supervision_masks: torch.Tensor
    supervision_cameras: list

    @property
    def all_images(self):
        return torch.cat([self.input_images, self.supervision_images])

    @property
    def all_masks(self):
        return torch.cat([self.input_masks, self.supervision_masks])

    @property
    def all_cameras(self):
        return list(self.input_cameras) + list(self.supervision_cameras)


def make_sample(spec: SceneSpec, views: ViewSet) -> SceneSample:
    ii, im, ic = views.subset(views.input_indices)
    si, sm, sc = views.subset(views.supervision_indices)
    return SceneSample(spec.seed, spec.tokens, ii, im, ic, si, sm, sc)


def build_sample(seed: int, resolution=(64, 64)) -> SceneSample:
    spec, cloud = generate_scene(seed)
    return make_sample(spec, render_viewset(cloud, seed, resolution))


# ---- on-disk layout -------------------------------------------------------
# <root>/scene_<seed:06d>/views.ftc   images, masks, depths, cloud attributes
# <root>/scene_<seed:06d>/meta.txt    key=value: seed, labels, tokens, poses
# <root>/scene_<seed:06d>/png/        optional 8-bit previews


def scene_dirname(seed: int) -> str:
    return f"scene_{seed:06d}"


def write_scene(root: Path, seed: int, resolution=(64, 64), png: bool = False) -> Path:
    from .io import save_png, write_ftc, write_kv

    spec, cloud = generate_scene(seed)
    views = render_viewset(cloud, seed, resolution)
    d = Path(root) / scene_dirname(seed)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {"images": views.images, "masks": views.masks, "depths": views.depths}
    tensors.update({f"cloud.{k}": v for k, v in cloud.tensors().items()})
    write_ftc(d / "views.ftc", tensors)
    meta = {
        "seed": seed,
        "labels": ";".join(f"{c}:{s}" for c, s in spec.labels),
        "tokens": ",".join(str(t) for t in spec.tokens),
        "input_indices": ",".join(map(str, views.input_indices)),
        "supervision_indices": ",".join(map(str, views.supervision_indices)),
        "azimuths": ",".join(f"{a:.9g}" for a in views.azimuths),
        "elevations": ",".join(f"{e:.9g}" for e in views.elevations),
        "radius": views.radius,
        "fov_deg": views.fov_deg,
        "resolution": f"{resolution[0]}x{resolution[1]}",
    }
    write_kv(d / "meta.txt", meta)
    if png:
        (d / "png").mkdir(exist_ok=True)
        for i, img in enumerate(views.images):
            save_png(d / "png" / f"view_{i:02d}.png", img)
    return d


@dataclass
class LoadedScene:
    seed: int
    tokens: list[int]
    labels: list[tuple[str, str]]
    views: ViewSet
    cloud: GaussianCloud

    def sample(self) -> SceneSample:
        ii, im, ic = self.views.subset(self.views.input_indices)
        si, sm, sc = self.views.subset(self.views.supervision_indices)
        return SceneSample(self.seed, self.tokens, ii, im, ic, si, sm, sc)


def load_scene(path: Path) -> LoadedScene:
    from .io import read_ftc, read_kv

    path = Path(path)
    meta = read_kv(path / "meta.txt")
    t = read_ftc(path / "views.ftc")
    H, W = (int(v) for v in meta["resolution"].split("x"))
    ints = lambda s: [int(v) for v in s.split(",") if v != ""]
    floats = lambda s: [float(v) for v in s.split(",") if v != ""]
    views = ViewSet(floats(meta["azimuths"]), floats(meta["elevations"]), ints(meta["input_indices"]),
                    ints(meta["supervision_indices"]), t["images"], t["masks"], t["depths"], (H, W),
                    float(meta["radius"]), float(meta["fov_deg"]))
    cloud = GaussianCloud(**{k: t[f"cloud.{k}"] for k in GaussianCloud.ATTRIBUTES})
    labels = [tuple(x.split(":")) for x in meta["labels"].split(";") if x]
    return LoadedScene(int(meta["seed"]), ints(meta["tokens"]), labels, views, cloud)


def list_scenes(root: Path) -> list[Path]:
    return sorted(p for p in Path(root).glob("scene_*") if p.is_dir())
