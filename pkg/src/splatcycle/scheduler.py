"""Diffusion-time arithmetic: noise schedule, forward noising, clean-image
estimation, the render-substituted posterior step, DDIM stepping/inversion and
classifier-free guidance.

Timesteps are integers in ``[0, T]``. Index 0 is the clean state with
``alpha_bar[0] == 1``; this is how a reference view is "kept clean". Every
operation accepts either a scalar timestep or a per-view vector whose length
matches the leading dimension of the image tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import torch

Timestep = Union[int, torch.Tensor]

ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha tables, stored in float64.

    ``betas[t - 1]`` is the beta of step ``t``. ``alpha_bars_full`` has length
    ``T + 1`` and carries the ``alpha_bar_0 = 1`` convention at index 0.
    """

    betas: torch.Tensor

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValueError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if not bool((betas[1:] >= betas[:-1]).all()):
            raise ValueError("betas must be nondecreasing")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        object.__setattr__(self, "alphas", alphas)
        alpha_bars = torch.cumprod(alphas, dim=0)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        full = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars])
        object.__setattr__(self, "alpha_bars_full", full)

    @property
    def num_steps(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t: Timestep) -> torch.Tensor:
        return self.alpha_bars_full[_check_t(t, 0, self.num_steps)]

    def alpha(self, t: Timestep) -> torch.Tensor:
        """Per-step alpha; ``alpha(0)`` is defined as 1."""
        full = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas])
        return full[_check_t(t, 0, self.num_steps)]


def make_schedule(
    T: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    kind: str = "scaled_linear",
) -> NoiseSchedule:
    if not isinstance(T, int) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=torch.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    # linspace can round a hair below beta_start at the ends
    betas = betas.clamp(beta_start, beta_end)
    return NoiseSchedule(betas)


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    return NoiseSchedule(torch.as_tensor(list(betas), dtype=torch.float64))


def _check_t(t: Timestep, lo: int, hi: int) -> torch.Tensor:
    idx = torch.as_tensor(t, dtype=torch.long)
    if bool((idx < lo).any()) or bool((idx > hi).any()):
        raise ValueError(f"timestep {t} outside [{lo}, {hi}]")
    return idx


def _bcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape scalar or per-view coefficients to broadcast against ``like``."""
    values = values.to(dtype=like.dtype if like.is_floating_point() else torch.float64, device=like.device)
    if values.ndim == 0:
        return values
    if values.shape[0] != like.shape[0]:
        raise ValueError(f"{values.shape[0]} timesteps for {like.shape[0]} views")
    return values.reshape(values.shape[0], *([1] * (like.ndim - 1)))


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t: Timestep, eps: torch.Tensor) -> torch.Tensor:
    """Forward noising ``sqrt(ab) * x0 + sqrt(1 - ab) * eps``."""
    _same_shape(x0, eps, "q_sample")
    ab = _bcast(schedule.alpha_bar(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def estimate_x0(schedule: NoiseSchedule, x_t: torch.Tensor, eps_pred: torch.Tensor, t: Timestep) -> torch.Tensor:
    """One-shot clean estimate from a noise prediction."""
    _same_shape(x_t, eps_pred, "estimate_x0")
    ab = _bcast(schedule.alpha_bar(t), x_t)
    return (x_t - (1 - ab).sqrt() * eps_pred) / ab.clamp_min(ALPHA_BAR_FLOOR).sqrt()


def posterior_coefficients(alpha_bar_t, alpha_bar_prev):
    """Weights ``(c_x0, c_xt)`` of the deterministic posterior mean.

    With ``alpha_t = alpha_bar_t / alpha_bar_prev`` (the effective step alpha,
    which is the schedule alpha when ``prev == t - 1``)::

        c_x0 = sqrt(alpha_bar_prev) * beta_t / (1 - alpha_bar_t)
        c_xt = sqrt(alpha_t) * (1 - alpha_bar_prev) / (1 - alpha_bar_t)
    """
    alpha_t = alpha_bar_t / alpha_bar_prev
    beta_t = 1 - alpha_t
    denom = 1 - alpha_bar_t
    c_x0 = alpha_bar_prev ** 0.5 * beta_t / denom
    c_xt = alpha_t ** 0.5 * (1 - alpha_bar_prev) / denom
    return c_x0, c_xt


def cycle_update(x_t, x0_rendered, alpha_bar_t, alpha_bar_prev):
    """Posterior-mean update with the re-rendered clean estimate in place of x0."""
    c_x0, c_xt = posterior_coefficients(alpha_bar_t, alpha_bar_prev)
    return c_x0 * x0_rendered + c_xt * x_t


def cycle_backward_step(
    schedule: NoiseSchedule,
    x_t: torch.Tensor,
    x0_rendered: torch.Tensor,
    t: Timestep,
    t_prev: Timestep | None = None,
) -> torch.Tensor:
    """Move ``x_t`` to ``x_{t_prev}`` using the rendered clean views.

    The ``x_0`` coefficient uses ``sqrt(alpha_bar_{t-1})`` (posterior-mean
    form). ``t_prev`` defaults to ``t - 1``; a respaced grid passes its next
    entry and the effective step alpha ``alpha_bar_t / alpha_bar_prev`` is used.
    No noise is added.
    """
    _same_shape(x_t, x0_rendered, "cycle_backward_step")
    t_idx = _check_t(t, 1, schedule.num_steps)
    prev_idx = t_idx - 1 if t_prev is None else _check_t(t_prev, 0, schedule.num_steps)
    if bool((prev_idx >= t_idx).any()):
        raise ValueError("t_prev must be smaller than t")
    ab_t = _bcast(schedule.alpha_bars_full[t_idx], x_t)
    ab_prev = _bcast(schedule.alpha_bars_full[prev_idx], x_t)
    return cycle_update(x_t, x0_rendered, ab_t, ab_prev)


def ddim_step(
    schedule: NoiseSchedule,
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: Timestep,
    t_prev: Timestep,
    eta: float = 0.0,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Standard DDIM update from ``t`` to ``t_prev`` (deterministic at eta=0)."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    t_idx = _check_t(t, 0, schedule.num_steps)
    prev_idx = _check_t(t_prev, 0, schedule.num_steps)
    if bool((prev_idx >= t_idx).any()):
        raise ValueError("t_prev must be smaller than t")
    x0_hat = estimate_x0(schedule, x_t, eps_pred, t_idx)
    ab_t = _bcast(schedule.alpha_bars_full[t_idx], x_t)
    ab_prev = _bcast(schedule.alpha_bars_full[prev_idx], x_t)
    if eta == 0:
        return ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps_pred
    if noise is None:
        raise ValueError("eta > 0 needs an explicit noise tensor")
    sigma = eta * ((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev)).sqrt()
    direction = (1 - ab_prev - sigma**2).clamp_min(0).sqrt() * eps_pred
    return ab_prev.sqrt() * x0_hat + direction + sigma * noise


def ddim_inverse_step(
    schedule: NoiseSchedule,
    x_prev: torch.Tensor,
    denoiser: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    t_prev: int,
    t: int,
    iters: int = 30,
    tol: float = 1e-10,
) -> torch.Tensor:
    """Solve ``ddim_step(x_t, eps(x_t, t), t, t_prev) == x_prev`` for ``x_t``.

    Fixed-point iteration on the implicit equation, started from the usual
    explicit inversion guess ``eps(x_prev, t)``. The result is the exact
    algebraic inverse of one deterministic step (up to ``tol``), so inverting
    and then sampling on the same grid round-trips.
    """
    ab_t = schedule.alpha_bars_full[t].item()
    ab_prev = schedule.alpha_bars_full[t_prev].item()
    ratio = math.sqrt(ab_t / ab_prev)
    s_prev = math.sqrt(1 - ab_prev)
    s_t = math.sqrt(1 - ab_t)

    def solve(eps):
        return ratio * (x_prev - s_prev * eps) + s_t * eps

    t_vec = torch.full((x_prev.shape[0],), t, dtype=torch.long)
    x_t = solve(denoiser(x_prev, t_vec))
    for _ in range(iters):
        nxt = solve(denoiser(x_t, t_vec))
        delta = (nxt - x_t).abs().max().item() if nxt.numel() else 0.0
        x_t = nxt
        if delta <= tol:
            break
    return x_t


def inversion_grid(step_grid: Sequence[int]) -> list[int]:
    """Ascending timesteps ``[0, ..., T]`` visited by inversion of ``step_grid``."""
    return [0] + sorted(int(t) for t in step_grid)


def ddim_invert(
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    denoiser: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    steps: int,
    iters: int = 30,
    step_grid: Sequence[int] | None = None,
) -> torch.Tensor:
    """Map clean images to the latent at the top of the substep grid.

    ``denoiser(x, t_vec)`` must be deterministic and return a noise prediction
    shaped like ``x``. The default grid is ``make_step_grid(T, steps)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = step_grid if step_grid is not None else make_step_grid(schedule.num_steps, steps)
    asc = inversion_grid(grid)
    x = x0
    for t_prev, t in zip(asc[:-1], asc[1:]):
        x = ddim_inverse_step(schedule, x, denoiser, t_prev, t, iters=iters)
    return x


def ddim_sample(
    schedule: NoiseSchedule,
    x_T: torch.Tensor,
    denoiser: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    steps: int,
    step_grid: Sequence[int] | None = None,
) -> torch.Tensor:
    """Deterministic DDIM sampling down the substep grid to t=0."""
    grid = list(step_grid) if step_grid is not None else make_step_grid(schedule.num_steps, steps)
    x = x_T
    for t, t_prev in zip(grid, grid[1:] + [0]):
        t_vec = torch.full((x.shape[0],), t, dtype=torch.long)
        x = ddim_step(schedule, x, denoiser(x, t_vec), t, t_prev)
    return x


def make_step_grid(T: int, steps: int) -> list[int]:
    """Uniform-stride descending grid starting at ``T``; the step after the last
    entry lands on 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    return [T - (i * T) // steps for i in range(steps)]


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.0
    null_id: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be nonnegative")
