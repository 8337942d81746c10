import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splatcycle.dataset import PerturbConfig, generate_scene, perturb_views, render_viewset
from splatcycle.metrics import (PSNR_CAP, config_hash, consistency_error, evaluate_views,
                                perceptual_distance, psnr, ssim)

from oracles import ssim_of_constants


def test_psnr_cap_and_closed_form():
    a = torch.rand(3, 8, 8)
    assert psnr(a, a) == PSNR_CAP
    a64 = a.double()
    assert psnr(a64, a64 + 0.1) == pytest.approx(20.0, abs=1e-9)
    x = (torch.rand(3, 8, 8) > 0.5).float()
    assert psnr(x, 1 - x) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(a, a[:2])


def test_ssim_closed_forms():
    a = torch.rand(3, 16, 16)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    zero, one = torch.zeros(3, 16, 16), torch.ones(3, 16, 16)
    assert ssim(zero, one) == pytest.approx(ssim_of_constants(0.0, 1.0), rel=1e-9)
    half = torch.full((3, 16, 16), 0.5)
    assert ssim(half, one) == pytest.approx(ssim_of_constants(0.5, 1.0), rel=1e-9)
    with pytest.raises(ValueError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(3, 12, 12, generator=g), torch.rand(3, 12, 12, generator=g)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


def test_perceptual_basics():
    a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    assert torch.all(perceptual_distance(a, a) == 0)
    d = perceptual_distance(a, b)
    assert d.shape == (2,) and torch.all(d > 0)
    assert torch.allclose(d, perceptual_distance(b, a))
    assert perceptual_distance(a[0], b[0]).ndim == 0
    x = a.clone().requires_grad_(True)
    perceptual_distance(x, b).sum().backward()
    assert torch.isfinite(x.grad).all()


@pytest.fixture(scope="module")
def scene():
    spec, cloud = generate_scene(11)
    return render_viewset(cloud, 11, (32, 32))


def _pick(vs, n=6):
    idx = list(range(0, 36, 36 // n))[:n]
    return vs.images[idx], [vs.cameras[i] for i in idx], vs.depths[idx], vs.masks[idx]


def test_consistency_floor_and_perturbation(scene):
    images, cams, depths, masks = _pick(scene)
    floor = consistency_error(images, cams, depths, masks)
    assert floor is not None and 0 <= floor < 0.05
    shifted = perturb_views(images, PerturbConfig(hue=0.2), seed=1)
    assert consistency_error(shifted, cams, depths, masks) > floor


def test_consistency_absent_cases(scene):
    images, cams, depths, masks = _pick(scene)
    assert consistency_error(images[:1], cams[:1], depths[:1], masks[:1]) is None
    assert consistency_error(images, cams, depths, torch.zeros_like(masks)) is None


def test_consistency_view_order_invariant(scene):
    images, cams, depths, masks = _pick(scene)
    perm = [3, 1, 5, 0, 2, 4]
    a = consistency_error(images, cams, depths, masks)
    b = consistency_error(images[perm], [cams[i] for i in perm], depths[perm], masks[perm])
    assert a == pytest.approx(b, rel=1e-12)


def test_report_files(tmp_path):
    gt = torch.rand(3, 3, 16, 16)
    rep = evaluate_views(gt, gt, seed=3, config_hash=config_hash({"a": 1}))
    assert rep.mean_psnr == PSNR_CAP and rep.mean_ssim == pytest.approx(1.0)
    txt, csv = rep.write(tmp_path)
    body = txt.read_text()
    assert "consistency=absent" in body and "seed=3" in body
    assert "clip" not in body
    assert csv.read_text().splitlines()[0] == "view,psnr,ssim,perceptual"
    assert len(csv.read_text().splitlines()) == 4


def test_config_hash_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
