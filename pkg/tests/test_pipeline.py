import math

import pytest
import torch

from splatcycle.dataset import PerturbConfig, build_sample, generate_scene
from splatcycle.pipeline import (LEARNED_MULTIVIEW, ORACLE_PERTURBED, PURE_NOISE, TEXT_TO_3D, CycleModel, ModelConfig,
                                 PriorProvider, TrainConfig, compute_loss, make_optimizer, sample,
                                 single_pass_reconstruction, train_step)
from splatcycle.scheduler import GuidanceConfig, make_step_grid
from splatcycle.splat import render_batch

from oracles import gaussian_posterior_mean

R = 16


@pytest.fixture(scope="module")
def scene():
    return build_sample(21, (R, R))


def tiny_model(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    m = CycleModel(ModelConfig(resolution=R, denoiser_width=8, reconstructor_width=8, heads=2)).to(dtype)
    torch.nn.init.normal_(m.denoiser.conv_out.weight, std=0.05)
    return m


class OracleModel(CycleModel):
    """Denoiser and reconstructor replaced by ground truth."""

    def __init__(self, gt_views, gt_cloud):
        super().__init__(ModelConfig(resolution=R, denoiser_width=8, reconstructor_width=8, heads=2))
        self.double()
        self.gt = gt_views.double() * 2 - 1
        self.cloud = gt_cloud.to(torch.float64)

    def denoise(self, x_t, t, per_view_tokens, ref_index=0, guidance=GuidanceConfig(scale=1.0), ref_injection=True):
        ab = self.schedule.alpha_bars_full[t].reshape(-1, 1, 1, 1)
        eps = (x_t - ab.sqrt() * self.gt) / (1 - ab).clamp_min(1e-30).sqrt()
        return torch.where(ab < 1, eps, torch.zeros_like(eps)), {}

    def reconstruct(self, x0_hat, cameras, t, features=None):
        return self.cloud


# ---- loss ----

def test_loss_zero_on_identical():
    img = torch.rand(12, 3, R, R)
    mask = torch.rand(12, R, R)
    assert compute_loss(img, mask, img, mask).total.item() == 0


def test_loss_lambda_zero_is_mse():
    a, b = torch.rand(12, 3, R, R), torch.rand(12, 3, R, R)
    m = torch.zeros(12, R, R)
    terms = compute_loss(a, m, b, m, lam=0.0)
    want = sum(((a[i] - b[i]) ** 2).mean() for i in range(12))
    assert terms.image.item() == pytest.approx(want.item(), rel=1e-6)
    assert terms.total.item() == pytest.approx(want.item(), rel=1e-6)


def test_mask_term_counts_pixels():
    img = torch.rand(12, 3, R, R)
    m = torch.zeros(12, R, R)
    m2 = m.clone()
    m2[3, :2, :5] = 1  # k = 10 pixels off by 1 in one view
    assert compute_loss(img, m, img, m2).mask.item() == pytest.approx(10 / (R * R))


def test_loss_count_mismatch():
    with pytest.raises(ValueError):
        compute_loss(torch.rand(12, 3, R, R), torch.rand(12, R, R), torch.rand(11, 3, R, R), torch.rand(11, R, R))


def test_default_train_config():
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.epochs, c.grad_clip_norm) == (1e-4, 0.05, 30, 1.0)
    assert (c.lambda_perceptual, c.prompt_dropout, c.reference_noisy_prob, c.num_steps) == (0.5, 0.3, 0.3, 1000)
    with pytest.raises(ValueError):
        TrainConfig(prompt_dropout=1.5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# ---- training ----

def test_train_step_frozen_denoiser_untouched(scene):
    m = tiny_model(dtype=torch.float32)
    before = {k: v.clone() for k, v in m.denoiser.state_dict().items()}
    rec_before = m.reconstructor.head.weight.clone()
    cfg = TrainConfig(learning_rate=1e-3)
    opt = make_optimizer(m, cfg)
    g = torch.Generator().manual_seed(0)
    for _ in range(2):
        res = train_step(m, opt, scene, cfg, g)
        assert math.isfinite(res.loss_total) and res.grad_norm > 0
    for k, v in m.denoiser.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert not torch.equal(rec_before, m.reconstructor.head.weight)


def test_train_step_oracle_render_is_zero_loss(scene):
    m = tiny_model(dtype=torch.float32)
    cfg = TrainConfig()
    opt = make_optimizer(m, cfg)
    gt = (scene.all_images, scene.all_masks)
    res = train_step(m, opt, scene, cfg, torch.Generator().manual_seed(0), render_override=lambda c, cams: gt)
    assert res.loss_total == 0


def test_nonfinite_loss_aborts(scene):
    m = tiny_model(dtype=torch.float32)
    cfg = TrainConfig()
    opt = make_optimizer(m, cfg)
    before = m.reconstructor.head.weight.clone()
    nan = (torch.full_like(scene.all_images, float("nan")), scene.all_masks)
    with pytest.raises(FloatingPointError):
        train_step(m, opt, scene, cfg, torch.Generator().manual_seed(0), render_override=lambda c, cams: nan)
    assert torch.equal(before, m.reconstructor.head.weight)


def test_unfrozen_mode_trains_denoiser(scene):
    m = tiny_model(dtype=torch.float32)
    cfg = TrainConfig(frozen_2d=False, learning_rate=1e-3)
    opt = make_optimizer(m, cfg)
    before = m.denoiser.conv_in.weight.clone()
    res = train_step(m, opt, scene, cfg, torch.Generator().manual_seed(1))
    assert not torch.equal(before, m.denoiser.conv_in.weight)
    assert res.loss_eps >= 0


def test_gate_freezing(scene):
    m = tiny_model(dtype=torch.float32)
    cfg = TrainConfig(freeze_gates=True, learning_rate=1e-2)
    opt = make_optimizer(m, cfg)
    g = torch.Generator().manual_seed(0)
    for _ in range(2):
        train_step(m, opt, scene, cfg, g)
    assert all(layer.gate.item() == 0 for layer in m.reconstructor.cross_attention_layers())


# ---- sampling ----

def test_oracle_networks_reproduce_ground_truth():
    spec, cloud = generate_scene(5)
    s = build_sample(5, (R, R))
    model = OracleModel(s.input_images, cloud)
    out = sample(model, s.input_cameras, reference=s.input_images[0], tokens=s.tokens,
                 prior_views=perturb(s.input_images), steps=10)
    renders, _ = render_batch(out.cloud, s.input_cameras)
    assert (renders - s.input_images.double()).abs().max() <= 1e-4
    assert (out.views - s.input_images.double()).abs().max() <= 1e-4


def perturb(views):
    return PriorProvider(ORACLE_PERTURBED, PerturbConfig(hue=0.2, warp_px=2.0), seed=0).views(
        [None] * views.shape[0], gt_views=views)


def test_reference_slot_bitwise_clean(scene):
    m = tiny_model()
    ref = scene.input_images[0]
    out = sample(m, scene.input_cameras, reference=ref, tokens=scene.tokens, prior_views=scene.input_images, steps=5,
                 record=True, guidance=GuidanceConfig(scale=2.0))
    want = ref.double() * 2 - 1
    for step in out.trajectory:
        assert torch.equal(step["x_t"][0], want)


def test_identity_stage_is_plain_posterior_sampler(scene):
    m = tiny_model()
    cams = scene.input_cameras
    ref = scene.input_images[0]
    guidance = GuidanceConfig(scale=2.0)
    steps = 6
    out = sample(m, cams, reference=ref, tokens=scene.tokens, steps=steps, record=True, guidance=guidance,
                 stage=lambda x0, t, f: x0, generator=torch.Generator().manual_seed(3))
    grid = make_step_grid(1000, steps)
    abar = m.schedule.alpha_bars_full
    x = out.trajectory[0]["x_t"].clone()
    ref_x = ref.double() * 2 - 1
    tokens = [list(scene.tokens)] * 4
    for i, (t, t_prev) in enumerate(zip(grid, grid[1:] + [0])):
        assert (x - out.trajectory[i]["x_t"]).abs().max() <= 1e-9
        tv = torch.tensor([0, t, t, t])
        with torch.no_grad():
            eps, _ = m.denoise(x, tv, tokens, 0, guidance)
        ab_v = abar[tv].reshape(-1, 1, 1, 1)
        x0 = ((x - (1 - ab_v).sqrt() * eps) / ab_v.sqrt()).clamp(-1, 1)
        a_t = (abar[t] / abar[t_prev]).item()
        mean, _ = gaussian_posterior_mean(a_t, abar[t_prev].item(), x, x0) if t_prev > 0 else (x0, None)
        x = mean
        x[0] = ref_x
    assert (((x + 1) / 2).clamp(0, 1) - out.views).abs().max() <= 1e-9


def test_single_step_returns_rendered_estimate(scene):
    m = tiny_model()
    captured = {}

    def stage(x0, t, feats):
        captured["x0r"] = x0 * 0.5
        return captured["x0r"]

    out = sample(m, scene.input_cameras, reference=scene.input_images[0], steps=1, stage=stage, record=True)
    want = captured["x0r"].clone()
    want[0] = scene.input_images[0].double() * 2 - 1
    assert torch.allclose(out.views, ((want + 1) / 2).clamp(0, 1), atol=1e-12)


def test_text_mode_without_reference(scene):
    m = tiny_model()
    out = sample(m, scene.input_cameras, tokens=scene.tokens, steps=2, mode=TEXT_TO_3D)
    assert out.views.shape == (4, 3, R, R)
    with pytest.raises(ValueError):
        sample(m, scene.input_cameras, steps=2)


def test_sampling_is_deterministic(scene):
    m = tiny_model()
    kw = dict(reference=scene.input_images[0], tokens=scene.tokens, prior_views=scene.input_images, steps=3)
    a = sample(m, scene.input_cameras, **kw)
    b = sample(m, scene.input_cameras, **kw)
    assert torch.equal(a.views, b.views) and torch.equal(a.cloud.positions, b.cloud.positions)


def test_prior_count_mismatch(scene):
    m = tiny_model()
    with pytest.raises(ValueError):
        sample(m, scene.input_cameras, reference=scene.input_images[0], prior_views=scene.input_images[:3], steps=2)


def test_per_view_prompt_validation(scene):
    m = tiny_model()
    with pytest.raises(ValueError):
        sample(m, scene.input_cameras, reference=scene.input_images[0], steps=1, per_view_prompts={7: [1]})


def test_prior_providers(scene):
    m = tiny_model()
    cams = scene.input_cameras
    assert PriorProvider(PURE_NOISE).views(cams) is None
    p = PriorProvider(ORACLE_PERTURBED, PerturbConfig(hue=0.2), seed=1).views(cams, gt_views=scene.input_images)
    assert p.shape == scene.input_images.shape and torch.equal(p[0], scene.input_images[0])
    with pytest.raises(ValueError):
        PriorProvider(ORACLE_PERTURBED).views(cams)
    learned = PriorProvider(LEARNED_MULTIVIEW, steps=2).views(cams, reference=scene.input_images[0], model=m)
    assert learned.shape == (4, 3, R, R) and torch.equal(learned[0], scene.input_images[0].double().clamp(0, 1))
    with pytest.raises(ValueError):
        PriorProvider("magic")


def test_single_pass_reconstruction_shape(scene):
    m = tiny_model()
    cloud = single_pass_reconstruction(m, scene.input_images, scene.input_cameras, scene.tokens)
    assert len(cloud) == 4 * (R // 2) ** 2
