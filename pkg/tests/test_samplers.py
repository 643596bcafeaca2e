import math

import pytest
import torch

from voxdiff.camera import spiral_trajectory
from voxdiff.denoiser import DenoiserConfig, build_denoiser
from voxdiff.renderer import RenderConfig, render_image
from voxdiff.samplers import (
    GuidanceTarget,
    complete_masked,
    completion_step,
    guidance_error,
    guidance_gradient,
    masked_target,
    sample_guided,
    sample_unconditional,
    unconditional_step,
)
from voxdiff.schedule import linear_schedule
from voxdiff.tensor_core import finite_difference_grad, relative_error

SHORT = linear_schedule(0.01, 0.2, 40)
TINY = DenoiserConfig(base_channels=8, channel_multipliers=(1, 2), attention_levels=(2,), attention_head_channels=8)


def random_net(seed=0):
    net = build_denoiser(TINY, seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.out.weight.copy_(0.05 * torch.randn(net.out.weight.shape, generator=g))
    return net


def oracle(f0, s):
    """Exact noise implied by f_t for a single memorised field."""

    def net(f_t, t):
        ab = torch.as_tensor(s.at("alpha_bar", t.numpy()), dtype=f_t.dtype).reshape(-1, 1, 1, 1, 1)
        return (f_t - ab.sqrt() * f0) / (1 - ab).sqrt()

    return net


def test_unconditional_is_deterministic():
    net = random_net()
    a = sample_unconditional(net, SHORT, torch.Generator().manual_seed(7), 4, n_samples=2)
    b = sample_unconditional(net, SHORT, torch.Generator().manual_seed(7), 4, n_samples=2)
    assert torch.equal(a, b)
    c = sample_unconditional(net, SHORT, torch.Generator().manual_seed(8), 4, n_samples=2)
    assert not torch.equal(a, c)


def test_oracle_denoiser_recovers_memorised_field():
    s = linear_schedule()
    f0 = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64) * 2 - 1
    out = sample_unconditional(oracle(f0, s), s, torch.Generator().manual_seed(2), 4, n_samples=3, dtype=torch.float64)
    assert (out - f0).abs().max() < 0.02


def test_single_step_schedule():
    s = linear_schedule(0.01, 0.01, 1)
    net = random_net(3)
    g = torch.Generator().manual_seed(4)
    out = sample_unconditional(net, s, g, 4)
    f1 = torch.randn((1, 4, 4, 4, 4), generator=torch.Generator().manual_seed(4))
    a, b, _ = s.reverse_constants(1)
    with torch.no_grad():
        expected = a * (f1 - b * net(f1, torch.tensor([1])))
    assert torch.allclose(out, expected, atol=1e-6)


def test_step_variances_differ():
    s = linear_schedule()
    g = torch.Generator().manual_seed(0)
    f = torch.randn(4, 2, 2, 2, generator=g, dtype=torch.float64)
    eps = torch.randn_like(f)
    z = torch.randn_like(f)
    m = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    t = 300
    du = unconditional_step(f, eps, t, s, z) - unconditional_step(f, eps, t, s, torch.zeros_like(z))
    dc = completion_step(f, eps, t, s, f, m, z) - completion_step(f, eps, t, s, f, m, torch.zeros_like(z))
    assert torch.allclose(du, math.sqrt(s.sigma2[t - 1]) * z, atol=1e-12)
    assert torch.allclose(dc, math.sqrt(1 - s.alpha_bar[t - 1]) * z, atol=1e-12)
    assert not torch.allclose(du, dc)


def test_no_noise_on_last_step():
    s = linear_schedule()
    f = torch.ones(4, 2, 2, 2)
    z = torch.ones_like(f)
    assert torch.equal(unconditional_step(f, f, 1, s, z), unconditional_step(f, f, 1, s, None))
    assert torch.equal(completion_step(f, f, 1, s, f, torch.ones(1, 2, 2, 2), z), completion_step(f, f, 1, s, f, torch.ones(1, 2, 2, 2), None))


def test_completion_with_empty_mask_returns_input():
    net = random_net()
    f_in = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(1)) * 2 - 1
    out = complete_masked(net, SHORT, f_in, torch.zeros(4, 4, 4), torch.Generator().manual_seed(0))
    assert torch.equal(out[0], f_in)


def test_completion_mixed_mask_keeps_known_region():
    net = random_net()
    f_in = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(1)) * 2 - 1
    m = torch.zeros(4, 4, 4)
    m[:2] = 1
    out = complete_masked(net, SHORT, f_in, m, torch.Generator().manual_seed(0), n_samples=2)
    known = (m == 0).expand(4, 4, 4, 4)
    for o in out:
        assert torch.equal(o[known], f_in[known])
        assert (o[~known] - f_in[~known]).abs().max() > 0.1


def test_completion_with_full_mask_ignores_input():
    net = random_net()
    m = torch.ones(4, 4, 4)
    a = complete_masked(net, SHORT, torch.zeros(4, 4, 4, 4), m, torch.Generator().manual_seed(5))
    b = complete_masked(net, SHORT, torch.ones(4, 4, 4, 4), m, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_completion_oracle_fills_masked_region():
    s = linear_schedule()
    f0 = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64) * 2 - 1
    m = torch.zeros(4, 4, 4, dtype=torch.float64)
    m[1:3, 1:3, 1:3] = 1
    out = complete_masked(oracle(f0, s), s, f0, m, torch.Generator().manual_seed(4))
    assert (out[0] - f0).abs().max() < 0.02


def test_mask_validation():
    net = random_net()
    f_in = torch.zeros(4, 4, 4, 4)
    with pytest.raises(ValueError):
        complete_masked(net, SHORT, f_in, torch.zeros(4, 4, 3), torch.Generator())
    with pytest.raises(ValueError):
        complete_masked(net, SHORT, f_in, torch.full((4, 4, 4), 0.5), torch.Generator())


def make_target(weight, width=6):
    cam = spiral_trajectory(4, width=width)[1]
    f = torch.full((4, 4, 4, 4), -1.0)
    f[0, 1:3, 1:3, 1:3] = 1.0
    f[1] = 1.0
    img = render_image(f, cam, RenderConfig(n_steps=16)).rgb
    return GuidanceTarget(img, cam, torch.ones(width, width), weight)


def test_zero_weight_guidance_is_unconditional():
    net = random_net()
    rc = RenderConfig(n_steps=16)
    a = sample_guided(net, SHORT, make_target(0.0), torch.Generator().manual_seed(9), 4, rc, n_samples=2)
    b = sample_unconditional(net, SHORT, torch.Generator().manual_seed(9), 4, n_samples=2)
    assert torch.equal(a, b)


def test_guidance_changes_the_trajectory():
    net = random_net()
    rc = RenderConfig(n_steps=16)
    a = sample_guided(net, SHORT, make_target(0.1), torch.Generator().manual_seed(9), 4, rc)
    b = sample_unconditional(net, SHORT, torch.Generator().manual_seed(9), 4)
    assert not torch.equal(a, b)


def test_guidance_gradient_matches_finite_differences():
    target = make_target(0.1, width=4)
    target = GuidanceTarget(target.image.double(), target.camera, torch.tensor([[1.0, 1, 0, 0]] * 4), 0.1)
    rc = RenderConfig(n_steps=16)
    f = torch.rand(1, 4, 4, 4, 4, generator=torch.Generator().manual_seed(2), dtype=torch.float64) * 1.4 - 0.7
    g = guidance_gradient(f, target, rc)[0]
    ref = masked_target(target, rc.background).reshape(3, -1).T
    fd = finite_difference_grad(lambda v: guidance_error(v, target, ref, rc), f[0])
    assert relative_error(g, fd) < 1e-3


def test_masked_target_uses_background():
    t = make_target(0.1, width=4)
    t = GuidanceTarget(torch.zeros(3, 4, 4), t.camera, torch.zeros(4, 4), 0.1)
    assert torch.equal(masked_target(t, (0.2, 0.3, 0.4))[:, 0, 0], torch.tensor([0.2, 0.3, 0.4]))


def test_guidance_target_validation():
    t = make_target(0.1)
    with pytest.raises(ValueError):
        GuidanceTarget(t.image, t.camera, t.foreground, -0.1)
    with pytest.raises(ValueError):
        GuidanceTarget(t.image[:, :3], t.camera, t.foreground, 0.1)


def biased(f_t, t):
    """A denoiser with the wrong scale and an offset, like a poorly fit network."""
    return 0.2 * f_t + 0.1


def test_clipping_keeps_a_biased_chain_bounded():
    s = linear_schedule()
    loose = sample_unconditional(biased, s, torch.Generator().manual_seed(0), 4, n_samples=2)
    tight = sample_unconditional(biased, s, torch.Generator().manual_seed(0), 4, n_samples=2, clip_denoised=True)
    assert loose.abs().max() > 10
    # at t = 1 the step returns the clipped estimate itself
    assert tight.abs().max() <= 1 + 1e-5


def test_clipping_is_inert_when_estimates_are_in_range():
    s = linear_schedule()
    f0 = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64) * 1.8 - 0.9
    a = sample_unconditional(oracle(f0, s), s, torch.Generator().manual_seed(2), 4, dtype=torch.float64)
    b = sample_unconditional(oracle(f0, s), s, torch.Generator().manual_seed(2), 4, dtype=torch.float64, clip_denoised=True)
    assert torch.allclose(a, b, atol=1e-8)


def test_clipped_completion_keeps_known_region():
    f_in = torch.rand(4, 4, 4, 4, generator=torch.Generator().manual_seed(1)) * 2 - 1
    m = torch.zeros(4, 4, 4)
    m[1:3] = 1
    out = complete_masked(biased, SHORT, f_in, m, torch.Generator().manual_seed(0), clip_denoised=True)[0]
    known = (m == 0).expand(4, 4, 4, 4)
    assert torch.equal(out[known], f_in[known])
    assert out.abs().max() <= 1 + 1e-5


def test_zero_weight_guidance_matches_clipped_unconditional():
    net = random_net()
    rc = RenderConfig(n_steps=16)
    a = sample_guided(net, SHORT, make_target(0.0), torch.Generator().manual_seed(9), 4, rc, clip_denoised=True)
    b = sample_unconditional(net, SHORT, torch.Generator().manual_seed(9), 4, clip_denoised=True)
    assert torch.equal(a, b)
