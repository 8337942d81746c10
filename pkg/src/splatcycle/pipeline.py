"""Joint training and cycle sampling of the denoiser and the reconstructor.

Sampling runs the generation-reconstruction cycle: at every timestep the
denoiser's clean estimate is reconstructed into Gaussians, re-rendered at the
working poses, and the render replaces the clean estimate in the posterior
mean update. In image-to-3D mode the reference view stays clean throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cameras import CameraPose
from .dataset import VOCAB, PerturbConfig, SceneSample, perturb_views
from .denoiser import NULL_ID, Denoiser, DenoiserConfig, MultiViewBatch
from .metrics import perceptual_distance
from .reconstructor import Reconstructor, ReconstructorConfig
from .scheduler import (GuidanceConfig, cycle_backward_step, ddim_inverse_step, ddim_step,
                        estimate_x0, make_schedule, make_step_grid, q_sample)
from .splat import GaussianCloud, render_batch

log = logging.getLogger(__name__)

IMAGE_TO_3D = "image_to_3d"
TEXT_TO_3D = "text_to_3d"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 30
    grad_clip_norm: float = 1.0
    lambda_perceptual: float = 0.5
    prompt_dropout: float = 0.30
    reference_noisy_prob: float = 0.30
    num_steps: int = 1000
    batch_size: int = 1
    seed: int = 0
    frozen_2d: bool = True
    freeze_gates: bool = False  # ablation: keep the feature-interaction gates at 0

    def __post_init__(self):
        for name in ("prompt_dropout", "reference_noisy_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        for name in ("learning_rate", "grad_clip_norm", "batch_size", "num_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda_perceptual < 0:
            raise ValueError("weight_decay and lambda_perceptual must be nonnegative")


@dataclass
class ModelConfig:
    resolution: int = 64
    denoiser_width: int = 64
    reconstructor_width: int = 64
    num_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    schedule_kind: str = "scaled_linear"
    vocab_size: int = len(VOCAB)
    heads: int = 4


class CycleModel(nn.Module):
    """The denoiser, the reconstructor and the schedule they share."""

    def __init__(self, config: ModelConfig | None = None, denoiser: Denoiser | None = None,
                 reconstructor: Reconstructor | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.denoiser = denoiser or Denoiser(DenoiserConfig(base_width=cfg.denoiser_width, vocab_size=cfg.vocab_size,
                                                            num_steps=cfg.num_steps, heads=cfg.heads))
        dcfg = self.denoiser.config
        feats = dcfg.feature_channels
        self.reconstructor = reconstructor or Reconstructor(ReconstructorConfig(
            base_width=cfg.reconstructor_width, time_dim=dcfg.emb_dim, context_channels=(feats[1], feats[2]),
            heads=cfg.heads, num_steps=cfg.num_steps))
        self.schedule = make_schedule(cfg.num_steps, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)

    @property
    def dtype(self):
        return self.denoiser.dtype

    def denoise(self, x_t, t, per_view_tokens, ref_index=0, guidance: GuidanceConfig = GuidanceConfig(scale=1.0),
                ref_injection: bool = True):
        batch = MultiViewBatch(x_t, t, per_view_tokens, reference_index=ref_index)
        return self.denoiser.predict_noise(batch, guidance, ref_injection)

    def reconstruct(self, x0_hat: torch.Tensor, cameras, t, features=None) -> GaussianCloud:
        """Clean estimates in [-1, 1] to Gaussians. Pixel space has no VAE, so
        decoding is only the range change to [0, 1]."""
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x0_hat.shape[0])
        t_emb = self.denoiser.per_view_time_embed(t)
        return self.reconstructor.reconstruct((x0_hat + 1) / 2, cameras, t, features, t_emb)


def freeze(module: nn.Module):
    module.requires_grad_(False)
    return module


def trainable_parameters(model: CycleModel, config: TrainConfig) -> list[nn.Parameter]:
    gates = {id(layer.gate) for layer in model.reconstructor.cross_attention_layers()}
    params = [p for p in model.reconstructor.parameters() if not (config.freeze_gates and id(p) in gates)]
    if not config.frozen_2d:
        params += list(model.denoiser.parameters())
    return params


def make_optimizer(model: CycleModel, config: TrainConfig) -> torch.optim.AdamW:
    if config.frozen_2d:
        freeze(model.denoiser)
    if config.freeze_gates:
        for layer in model.reconstructor.cross_attention_layers():
            layer.gate.requires_grad_(False)
    return torch.optim.AdamW(trainable_parameters(model, config), lr=config.learning_rate,
                             weight_decay=config.weight_decay)


# ---- loss -----------------------------------------------------------------

@dataclass
class LossTerms:
    total: torch.Tensor
    image: torch.Tensor  # sum over views of mse + lambda * perceptual
    mask: torch.Tensor
    mse: torch.Tensor
    perceptual: torch.Tensor


def compute_loss(render_images: torch.Tensor, render_masks: torch.Tensor, gt_images: torch.Tensor,
                 gt_masks: torch.Tensor, lam: float = 0.5) -> LossTerms:
    """Sum over supervised views of image MSE + lam * perceptual + mask MSE.

    Each squared norm is a mean over elements, so one view's mask term with
    ``k`` pixels off by 1 is ``k / (H * W)``.
    """
    if render_images.shape != gt_images.shape or render_masks.shape != gt_masks.shape:
        raise ValueError("renders and ground truth differ in count or shape")
    if render_images.shape[0] != render_masks.shape[0]:
        raise ValueError("image and mask counts differ")
    gt_images = gt_images.to(render_images.dtype)
    gt_masks = gt_masks.to(render_masks.dtype)
    mse = ((render_images - gt_images) ** 2).mean(dim=(1, 2, 3)).sum()
    mask = ((render_masks - gt_masks) ** 2).mean(dim=(1, 2)).sum()
    perc = perceptual_distance(render_images, gt_images).sum() if lam else torch.zeros((), dtype=mse.dtype)
    image = mse + lam * perc
    return LossTerms(image + mask, image, mask, mse, perc)


# ---- training ----------------------------------------------------------------

@dataclass
class StepResult:
    loss_total: float
    loss_image: float
    loss_mask: float
    loss_eps: float
    grad_norm: float
    clipped: bool
    t: int


def _bernoulli(p: float, gen: torch.Generator) -> bool:
    return bool(torch.rand((), generator=gen, dtype=torch.float64) < p)


def _noisy_inputs(model: CycleModel, sample: SceneSample, config: TrainConfig, gen: torch.Generator):
    x0 = sample.input_images.to(model.dtype) * 2 - 1
    T = model.schedule.num_steps
    t = int(torch.randint(1, T + 1, (), generator=gen))
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(model.dtype)
    per_view_t = torch.full((x0.shape[0],), t, dtype=torch.long)
    if not _bernoulli(config.reference_noisy_prob, gen):
        per_view_t[0] = 0
    x_t = q_sample(model.schedule, x0, per_view_t, eps)
    tokens = [NULL_ID] if _bernoulli(config.prompt_dropout, gen) else list(sample.tokens)
    return x0, x_t, eps, per_view_t, t, tokens


def _check_finite(value: torch.Tensor, what: str):
    if not bool(torch.isfinite(value).all()):
        log.error("non-finite %s; step aborted", what)
        raise FloatingPointError(f"non-finite {what}")


def train_step(model: CycleModel, optimizer: torch.optim.Optimizer, samples, config: TrainConfig,
               gen: torch.Generator, render_override: Optional[Callable] = None) -> StepResult:
    """One optimizer step over a batch of scenes.

    Noises the 4 input views at one random ``t`` (the reference is kept clean
    at t=0 with probability ``1 - reference_noisy_prob``), estimates x0 with
    the denoiser, reconstructs with its decoder features, renders all 12
    supervised poses and applies the clipped update. Outside frozen-2D mode
    the denoiser also gets its epsilon-prediction loss.
    ``render_override(cloud, cameras)`` replaces rendering, for tests.
    """
    if isinstance(samples, SceneSample):
        samples = [samples]
    model.train()
    optimizer.zero_grad(set_to_none=True)
    acc = {"total": 0.0, "image": 0.0, "mask": 0.0, "eps": 0.0}
    last_t = 0
    for sample in samples:
        x0, x_t, eps, per_view_t, t, tokens = _noisy_inputs(model, sample, config, gen)
        last_t = t
        with torch.set_grad_enabled(not config.frozen_2d):
            eps_pred, feats = model.denoise(x_t, per_view_t, [tokens] * x0.shape[0])
        x0_hat = estimate_x0(model.schedule, x_t, eps_pred, per_view_t).clamp(-1, 1)
        cloud = model.reconstruct(x0_hat, sample.input_cameras, per_view_t, feats)
        cams = sample.all_cameras
        if render_override is not None:
            images, masks = render_override(cloud, cams)
        else:
            images, masks = render_batch(cloud, cams)
        terms = compute_loss(images, masks, sample.all_images, sample.all_masks, config.lambda_perceptual)
        objective = terms.total
        if not config.frozen_2d:
            noisy = per_view_t > 0
            loss_eps = F.mse_loss(eps_pred[noisy], eps[noisy])
            objective = objective + loss_eps
            acc["eps"] += loss_eps.item() / len(samples)
        _check_finite(objective, "training loss")
        if objective.requires_grad:  # a constant objective (oracle renders) has nothing to differentiate
            (objective / len(samples)).backward()
        acc["total"] += terms.total.item() / len(samples)
        acc["image"] += terms.image.item() / len(samples)
        acc["mask"] += terms.mask.item() / len(samples)
    params = [p for g in optimizer.param_groups for p in g["params"]]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm))
    _check_finite(torch.tensor(grad_norm), "gradient norm")
    optimizer.step()
    return StepResult(acc["total"], acc["image"], acc["mask"], acc["eps"], grad_norm,
                      grad_norm > config.grad_clip_norm, last_t)


def denoiser_train_step(model: CycleModel, optimizer: torch.optim.Optimizer, samples, config: TrainConfig,
                        gen: torch.Generator) -> float:
    """Epsilon-prediction step for the 2D model alone (the stand-in for pretraining)."""
    if isinstance(samples, SceneSample):
        samples = [samples]
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for sample in samples:
        x0, x_t, eps, per_view_t, t, tokens = _noisy_inputs(model, sample, config, gen)
        eps_pred, _ = model.denoise(x_t, per_view_t, [tokens] * x0.shape[0])
        noisy = per_view_t > 0
        loss = F.mse_loss(eps_pred[noisy], eps[noisy])
        _check_finite(loss, "denoiser loss")
        (loss / len(samples)).backward()
        total += loss.item() / len(samples)
    params = [p for g in optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
    optimizer.step()
    return total


# ---- sampling -----------------------------------------------------------------

@dataclass
class CycleState:
    x_t: torch.Tensor
    t: int
    conditioning: list
    reference_image: Optional[torch.Tensor]
    mode: str
    step_grid: list[int]


@dataclass
class SampleResult:
    cloud: GaussianCloud
    views: torch.Tensor  # (V, 3, H, W) final x_0 in [0, 1]
    step_grid: list[int]
    trajectory: list[dict] = field(default_factory=list)


def render_stage(model: CycleModel, cameras):
    """The default x0 -> Gaussians -> re-render map used inside the cycle."""

    def stage(x0_hat, t, features):
        cloud = model.reconstruct(x0_hat, cameras, t, features)
        images, _ = render_batch(cloud, cameras)
        return images.to(x0_hat.dtype) * 2 - 1

    return stage


def _view_tokens(V: int, tokens, per_view_prompts: Optional[dict]) -> list[list[int]]:
    out = [list(tokens) if len(tokens) else [NULL_ID] for _ in range(V)]
    for i, toks in (per_view_prompts or {}).items():
        if not 0 <= int(i) < V:
            raise ValueError(f"prompt override for view {i} of {V}")
        out[int(i)] = list(toks)
    return out


def invert_views(model: CycleModel, views01: torch.Tensor, per_view_tokens, step_grid: Sequence[int],
                 reference: Optional[torch.Tensor] = None, ref_index: int = 0, iters: int = 8) -> torch.Tensor:
    """DDIM-invert prior views (in [0, 1]) to the top of ``step_grid``.

    With a reference, its slot stays at the clean encoding and timestep 0.
    The conditional prediction is used unguided.
    """
    x = views01.to(model.dtype) * 2 - 1
    ref_x = None if reference is None else reference.to(model.dtype) * 2 - 1

    def eps_fn(xs, t_vec):
        t_vec = t_vec.clone()
        if ref_x is not None:
            xs = xs.clone()
            xs[ref_index] = ref_x
            t_vec[ref_index] = 0
        eps, _ = model.denoise(xs, t_vec, per_view_tokens, ref_index)
        return eps

    asc = [0] + sorted(int(t) for t in step_grid)
    if ref_x is not None:
        x[ref_index] = ref_x
    for t_prev, t in zip(asc[:-1], asc[1:]):
        x = ddim_inverse_step(model.schedule, x, eps_fn, t_prev, t, iters=iters)
        if ref_x is not None:
            x[ref_index] = ref_x
    return x


@torch.no_grad()
def sample(
    model: CycleModel,
    cameras: Sequence[CameraPose],
    *,
    reference: Optional[torch.Tensor] = None,
    tokens: Sequence[int] = (),
    prior_views: Optional[torch.Tensor] = None,
    steps: int = 30,
    mode: str = IMAGE_TO_3D,
    per_view_prompts: Optional[dict] = None,
    guidance: Optional[GuidanceConfig] = None,
    generator: Optional[torch.Generator] = None,
    stage: Optional[Callable] = None,
    record: bool = False,
    reference_index: int = 0,
    clip_x0: bool = True,
    invert_iters: int = 8,
    diagnostics_dir: Optional[Path] = None,
) -> SampleResult:
    """Cycle sampling.

    ``prior_views`` (V, 3, H, W) in [0, 1] are DDIM-inverted to the initial
    latent; without them the start is pure noise. ``stage(x0_hat, t, feats)``
    overrides the reconstruct-and-render map (the identity turns this into a
    plain posterior-mean sampler).
    """
    model.eval()
    V = len(cameras)
    if mode not in (IMAGE_TO_3D, TEXT_TO_3D):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == IMAGE_TO_3D and reference is None:
        raise ValueError("image_to_3d sampling needs a reference image")
    if prior_views is not None and prior_views.shape[0] != V:
        raise ValueError(f"{prior_views.shape[0]} prior views for {V} cameras")
    guidance = guidance or GuidanceConfig()
    stage = stage or render_stage(model, cameras)
    grid = make_step_grid(model.schedule.num_steps, steps)
    view_tokens = _view_tokens(V, tokens, per_view_prompts)
    H, W = cameras[0].resolution
    ref = reference if mode == IMAGE_TO_3D else None
    ref_x = None if ref is None else ref.to(model.dtype) * 2 - 1

    if prior_views is not None:
        x = invert_views(model, prior_views, view_tokens, grid, ref, reference_index, invert_iters)
    else:
        gen = generator or torch.Generator().manual_seed(0)
        x = torch.randn((V, 3, H, W), generator=gen, dtype=torch.float64).to(model.dtype)
    if ref_x is not None:
        x[reference_index] = ref_x

    trajectory = []
    for t, t_prev in zip(grid, grid[1:] + [0]):
        t_vec = torch.full((V,), t, dtype=torch.long)
        if ref_x is not None:
            t_vec[reference_index] = 0
        eps, feats = model.denoise(x, t_vec, view_tokens, reference_index, guidance)
        x0_hat = estimate_x0(model.schedule, x, eps, t_vec)
        if clip_x0:
            x0_hat = x0_hat.clamp(-1, 1)
        x0_render = stage(x0_hat, t_vec, feats)
        x_next = cycle_backward_step(model.schedule, x, x0_render, t, t_prev)
        if ref_x is not None:
            x_next[reference_index] = ref_x
        if not bool(torch.isfinite(x_next).all()):
            if diagnostics_dir is not None:
                from .io import write_ftc

                Path(diagnostics_dir).mkdir(parents=True, exist_ok=True)
                write_ftc(Path(diagnostics_dir) / f"nonfinite_t{t}.ftc",
                          {"x_t": x, "x0_hat": x0_hat, "x0_rendered": x0_render})
            raise FloatingPointError(f"non-finite latent at t={t}")
        if record:
            trajectory.append({"t": t, "x_t": x.clone(), "x0_hat": x0_hat.clone(), "x0_rendered": x0_render.clone()})
        x = x_next

    # the output cloud comes from the last clean estimate and its features, read as t=0
    cloud = model.reconstruct(x0_hat, cameras, torch.zeros(V, dtype=torch.long), feats)
    return SampleResult(cloud, ((x + 1) / 2).clamp(0, 1), grid, trajectory)


# ---- priors -----------------------------------------------------------------

ORACLE_PERTURBED = "oracle_perturbed"
LEARNED_MULTIVIEW = "learned_multiview"
PURE_NOISE = "pure_noise"


@dataclass
class PriorProvider:
    """Source of the initial multi-view images that get inverted to noise.

    ``oracle_perturbed`` takes ground-truth renders at the working poses and
    perturbs every non-reference view independently. ``learned_multiview``
    runs plain DDIM sampling with a denoiser (no reconstruction in the loop).
    ``pure_noise`` provides nothing.
    """

    variant: str = ORACLE_PERTURBED
    perturb: PerturbConfig = field(default_factory=lambda: PerturbConfig(hue=0.2, warp_px=2.0))
    seed: int = 0
    steps: int = 30
    denoiser_model: Optional[CycleModel] = None

    def __post_init__(self):
        if self.variant not in (ORACLE_PERTURBED, LEARNED_MULTIVIEW, PURE_NOISE):
            raise ValueError(f"unknown prior variant {self.variant!r}")

    def views(self, cameras, *, gt_views: Optional[torch.Tensor] = None, reference: Optional[torch.Tensor] = None,
              tokens: Sequence[int] = (), model: Optional[CycleModel] = None) -> Optional[torch.Tensor]:
        if self.variant == PURE_NOISE:
            return None
        if self.variant == ORACLE_PERTURBED:
            if gt_views is None:
                raise ValueError("oracle_perturbed needs ground-truth views")
            if gt_views.shape[0] != len(cameras):
                raise ValueError(f"{gt_views.shape[0]} views for {len(cameras)} cameras")
            return perturb_views(gt_views, self.perturb, self.seed)
        m = self.denoiser_model or model
        if m is None:
            raise ValueError("learned_multiview needs a model")
        return learned_multiview_prior(m, cameras, reference, tokens, self.steps, self.seed)


@torch.no_grad()
def learned_multiview_prior(model: CycleModel, cameras, reference, tokens, steps: int, seed: int) -> torch.Tensor:
    """Plain deterministic DDIM sampling of V views from noise, reference kept clean."""
    V = len(cameras)
    H, W = cameras[0].resolution
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((V, 3, H, W), generator=gen, dtype=torch.float64).to(model.dtype)
    ref_x = None if reference is None else reference.to(model.dtype) * 2 - 1
    view_tokens = _view_tokens(V, tokens, None)
    grid = make_step_grid(model.schedule.num_steps, steps)
    for t, t_prev in zip(grid, grid[1:] + [0]):
        t_vec = torch.full((V,), t, dtype=torch.long)
        if ref_x is not None:
            x[0] = ref_x
            t_vec[0] = 0
        eps, _ = model.denoise(x, t_vec, view_tokens, 0)
        t_prev_vec = torch.full((V,), t_prev, dtype=torch.long)
        if ref_x is not None:
            t_prev_vec[0] = 0
        x = ddim_step(model.schedule, x, eps, t_vec, t_prev_vec) if ref_x is None else \
            torch.cat([ref_x[None], ddim_step(model.schedule, x[1:], eps[1:], t, t_prev)])
    return ((x + 1) / 2).clamp(0, 1)


def single_pass_reconstruction(model: CycleModel, views01: torch.Tensor, cameras, tokens=()) -> GaussianCloud:
    """The two-stage baseline: reconstruct the prior views directly at t=0."""
    with torch.no_grad():
        x = views01.to(model.dtype) * 2 - 1
        t = torch.zeros(x.shape[0], dtype=torch.long)
        _, feats = model.denoise(x, t, _view_tokens(x.shape[0], tokens, None), 0)
        return model.reconstruct(x, cameras, t, feats)


# ---- loops ------------------------------------------------------------------

def _pick(samples: Sequence[SceneSample], batch_size: int, gen: torch.Generator) -> list[SceneSample]:
    idx = torch.randint(len(samples), (batch_size,), generator=gen)
    return [samples[int(i)] for i in idx]


def pretrain_denoiser(model: CycleModel, samples: Sequence[SceneSample], steps: int, gen: torch.Generator,
                      learning_rate: float = 1e-3, batch_size: int = 2,
                      callback: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Epsilon-prediction training of the 2D model on the input views.

    Stands in for the pretrained image model that the joint stage keeps frozen.
    """
    if not samples:
        raise ValueError("no training scenes")
    model.denoiser.requires_grad_(True)
    cfg = TrainConfig(learning_rate=learning_rate, frozen_2d=False, batch_size=batch_size)
    opt = torch.optim.AdamW(model.denoiser.parameters(), lr=learning_rate, weight_decay=cfg.weight_decay)
    losses = []
    for step in range(steps):
        loss = denoiser_train_step(model, opt, _pick(samples, batch_size, gen), cfg, gen)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return losses


def fit(model: CycleModel, optimizer: torch.optim.Optimizer, samples: Sequence[SceneSample], config: TrainConfig,
        steps: int, gen: torch.Generator, callback: Optional[Callable[[int, StepResult], None]] = None,
        start_step: int = 0) -> list[StepResult]:
    """Run ``steps`` joint training steps on batches drawn from ``samples``."""
    if not samples:
        raise ValueError("no training scenes")
    results = []
    for step in range(start_step, start_step + steps):
        res = train_step(model, optimizer, _pick(samples, config.batch_size, gen), config, gen)
        results.append(res)
        if callback is not None:
            callback(step, res)
    return results
