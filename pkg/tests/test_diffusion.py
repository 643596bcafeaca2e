import math

import numpy as np
import pytest
import torch

from voxdiff.camera import spiral_trajectory
from voxdiff.dataset_io import analytic_field
from voxdiff.denoiser import DenoiserConfig, build_denoiser
from voxdiff.diffusion import (
    TrainingConfig,
    TrainingSample,
    compute_losses,
    draw_views_and_pixels,
    estimate_f0,
    forward_diffuse,
    forward_step,
    loss_rf,
    loss_rgb,
    rendering_error,
    train_step,
)
from voxdiff.renderer import RenderConfig, render_image
from voxdiff.schedule import linear_schedule
from voxdiff.tensor_core import ShapeError, finite_difference_grad, relative_error

S = linear_schedule()
RC = RenderConfig(n_steps=16)


def make_sample(n=4, views=3, width=6, dtype=torch.float64):
    f0 = analytic_field([{"type": "sphere", "center": [0, 0, 0], "radius": 0.6, "color": [0.8, 0.3, 0.1]}], n).to(dtype)
    cams = spiral_trajectory(views, width=width)
    with torch.no_grad():
        imgs = torch.stack([render_image(f0, c, RC).rgb for c in cams])
    return TrainingSample(f0, cams, imgs)


def test_forward_and_estimate_are_inverse(gen):
    f0 = torch.randn(4, 5, 5, 5, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 5, 5, 5, generator=gen, dtype=torch.float64)
    for t in (1, 37, 500, 1000):
        ft = forward_diffuse(f0, t, eps, S)
        ab = S.alpha_bar[t - 1]
        assert torch.allclose(ft, math.sqrt(ab) * f0 + math.sqrt(1 - ab) * eps, atol=1e-14)
        if t < 1000:  # sqrt(alpha_bar_T) ~ 2e-6 amplifies rounding
            assert torch.allclose(estimate_f0(ft, t, eps, S), f0, atol=1e-9)


def test_batched_steps(gen):
    f0 = torch.randn(3, 4, 2, 2, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn_like(f0)
    t = np.array([1, 400, 1000])
    ft = forward_diffuse(f0, t, eps, S)
    for i, ti in enumerate(t):
        assert torch.allclose(ft[i], forward_diffuse(f0[i], int(ti), eps[i], S), atol=1e-15)


@pytest.mark.parametrize("t", [1, 10, 500, 1000])
def test_iterated_chain_matches_direct_marginal(t):
    n = 20000
    g = torch.Generator().manual_seed(t)
    f0 = torch.full((n,), 0.7, dtype=torch.float64)
    x = f0.clone()
    for k in range(1, t + 1):
        x = forward_step(x, k, torch.randn(n, generator=g, dtype=torch.float64), S)
    direct = forward_diffuse(f0, t, torch.randn(n, generator=g, dtype=torch.float64), S)
    m1, m2 = x.mean().item(), direct.mean().item()
    v1, v2 = x.var().item(), direct.var().item()
    se_mean = math.sqrt((v1 + v2) / n)
    se_var = math.sqrt(2.0 / (n - 1)) * math.sqrt(v1**2 + v2**2)
    assert abs(m1 - m2) < 3 * se_mean
    assert abs(v1 - v2) < 3 * se_var


def test_loss_rf_values_and_gradient(gen):
    eps = torch.randn(4, 3, 3, 3, generator=gen, dtype=torch.float64)
    assert loss_rf(eps, eps).item() == 0.0
    assert loss_rf(eps, eps + 0.5).item() == pytest.approx(0.25)
    pred = torch.randn_like(eps).requires_grad_(True)
    loss_rf(eps, pred).backward()
    assert torch.allclose(pred.grad, 2 * (pred.detach() - eps) / eps.numel())
    perm = torch.randperm(eps.numel(), generator=gen)
    a = loss_rf(eps.reshape(-1)[perm], pred.detach().reshape(-1)[perm])
    assert a.item() == pytest.approx(loss_rf(eps, pred.detach()).item(), rel=1e-14)
    with pytest.raises(ShapeError):
        loss_rf(eps, eps[:2])


def test_loss_rgb_vanishes_at_last_step():
    sample = make_sample()
    cfg = TrainingConfig(views_per_step=2, pixels_per_step=16, render=RC)
    junk = torch.zeros_like(sample.f0)
    val = loss_rgb(junk, sample, 1000, S, cfg).item()
    assert 0 <= val <= S.omega[-1] * 3.0
    assert S.omega[-1] < 1e-22


def test_loss_rgb_is_zero_on_exact_field():
    sample = make_sample()
    cfg = TrainingConfig(views_per_step=2, pixels_per_step=36, render=RC)
    assert loss_rgb(sample.f0, sample, 1, S, cfg).item() < 1e-20


def test_loss_rgb_gradient_matches_finite_differences(rng):
    sample = make_sample()
    cfg = TrainingConfig(views_per_step=2, pixels_per_step=20, render=RC)
    est = torch.from_numpy(rng.uniform(-0.7, 0.7, size=(4, 4, 4, 4)))
    draws = draw_views_and_pixels(sample, cfg, torch.Generator().manual_seed(0))

    def fn(v):
        return S.omega[4] * rendering_error(v, sample, draws, RC)

    x = est.clone().requires_grad_(True)
    fn(x).backward()
    assert relative_error(x.grad, finite_difference_grad(fn, est)) < 1e-4


def test_draws_are_distinct_views():
    sample = make_sample(views=5)
    cfg = TrainingConfig(views_per_step=3, pixels_per_step=30)
    draws = draw_views_and_pixels(sample, cfg, torch.Generator().manual_seed(1))
    views = [v for v, _ in draws]
    assert len(set(views)) == 3
    assert all(p.shape == (10, 2) for _, p in draws)


def tiny_net(dtype=torch.float32):
    cfg = DenoiserConfig(base_channels=8, channel_multipliers=(1, 2), attention_levels=(2,), attention_head_channels=8)
    return build_denoiser(cfg, seed=0, dtype=dtype)


def test_zero_lambda_reduces_to_field_loss():
    batch = [make_sample(dtype=torch.float32)] * 2
    net = tiny_net()
    cfg = TrainingConfig(lambda_rgb=0.0, views_per_step=2, pixels_per_step=16, render=RC)
    rf, rgb, t = compute_losses(batch, net, S, cfg, torch.Generator().manual_seed(5))
    assert torch.equal(rgb, torch.zeros(2))
    cfg1 = TrainingConfig(lambda_rgb=1.0, views_per_step=2, pixels_per_step=16, render=RC)
    rf1, _, t1 = compute_losses(batch, net, S, cfg1, torch.Generator().manual_seed(5))
    assert torch.equal(rf, rf1) and torch.equal(t, t1)


def run_steps(seed):
    torch.manual_seed(99)
    batch = [make_sample(dtype=torch.float32)] * 2
    net = tiny_net()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    cfg = TrainingConfig(lambda_rgb=1.0, views_per_step=2, pixels_per_step=16, render=RC)
    g = torch.Generator().manual_seed(seed)
    recs = [train_step(batch, net, opt, S, cfg, g) for _ in range(3)]
    return recs, torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def test_train_step_is_deterministic():
    r1, p1 = run_steps(3)
    r2, p2 = run_steps(3)
    assert r1 == r2
    assert torch.equal(p1, p2)
    assert set(r1[0]) >= {"loss_rf", "loss_rgb", "total", "t"}


def test_train_step_rejects_non_finite():
    sample = make_sample(dtype=torch.float32)
    bad = TrainingSample(sample.f0 * float("nan"), sample.cameras, sample.images)
    net = tiny_net()
    opt = torch.optim.Adam(net.parameters())
    with pytest.raises(FloatingPointError):
        train_step([bad], net, opt, S, TrainingConfig(lambda_rgb=0.0), torch.Generator().manual_seed(0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lambda_rgb=-1.0)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig(final_learning_rate=0.0)
