"""Reverse-process samplers: unconditional, masked completion and image guidance.

All samplers work on batches ``[B, 4, N, N, N]`` and draw every random number
from the supplied ``torch.Generator`` in a fixed order, so a trajectory is a
pure function of (network, schedule, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from .camera import Camera, all_pixels
from .diffusion import estimate_f0
from .grid_field import clamp_field
from .renderer import RenderConfig, render_pixels
from .schedule import NoiseSchedule

Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _eps(net: Denoiser, f_t: torch.Tensor, t: int) -> torch.Tensor:
    tt = torch.full((f_t.shape[0],), t, dtype=torch.long)
    with torch.no_grad():
        return net(f_t, tt)


def clipped_eps(f_t: torch.Tensor, eps: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    """Noise prediction re-derived from the denoised estimate clamped to [-1, 1].

    The network's output head normalises its features, so it cannot follow a
    trajectory whose scale or mean drifts off the training marginal; any such
    drift is then amplified by a_t > 1 at every step. Tying eps back to a
    bounded estimate keeps the chain on the data range.
    """
    ab = float(s.at("alpha_bar", t))
    f0 = estimate_f0(f_t, t, eps, s).clamp(-1.0, 1.0)
    return (f_t - math.sqrt(ab) * f0) / math.sqrt(1.0 - ab)


def reverse_mean(f_t: torch.Tensor, eps: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    a, b, _ = s.reverse_constants(t)
    return a * (f_t - b * eps)


def unconditional_step(f_t, eps, t: int, s: NoiseSchedule, z) -> torch.Tensor:
    """f_{t-1} = a_t (f_t - b_t eps) + sqrt(Sigma_t) z, no noise at t = 1."""
    mu = reverse_mean(f_t, eps, t, s)
    if t == 1:
        return mu
    return mu + math.sqrt(s.reverse_constants(t)[2]) * z


def completion_step(f_t, eps, t: int, s: NoiseSchedule, f_in, m, z) -> torch.Tensor:
    """Fuse the denoised estimate with the known input, then re-noise with variance 1 - alpha_bar_t."""
    ab = float(s.at("alpha_bar", t))
    f0_est = estimate_f0(f_t, t, eps, s)
    fused = m * f0_est + (1.0 - m) * f_in
    mean = math.sqrt(ab) * fused
    if t == 1:
        return mean
    return mean + math.sqrt(1.0 - ab) * z


def _initial_noise(shape, generator, dtype):
    return torch.randn(shape, generator=generator, dtype=dtype)


def sample_unconditional(
    net: Denoiser,
    s: NoiseSchedule,
    generator: torch.Generator,
    resolution: int,
    n_samples: int = 1,
    clamp: bool = False,
    dtype=torch.float32,
    clip_denoised: bool = False,
) -> torch.Tensor:
    shape = (n_samples, 4, resolution, resolution, resolution)
    f = _initial_noise(shape, generator, dtype)
    for t in range(s.T, 0, -1):
        eps = _eps(net, f, t)
        if clip_denoised:
            eps = clipped_eps(f, eps, t, s)
        z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
        f = unconditional_step(f, eps, t, s, z)
    return clamp_field(f) if clamp else f


def _mask_tensor(m, f_in: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(m, dtype=f_in.dtype)
    n = f_in.shape[-1]
    if m.ndim == 4 and m.shape[0] == 1:
        m = m[0]
    if tuple(m.shape) != (n, n, n):
        raise ValueError(f"mask shape {list(m.shape)} does not match field grid [{n}, {n}, {n}]")
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    return m.unsqueeze(0)  # broadcast over channels


def complete_masked(
    net: Denoiser,
    s: NoiseSchedule,
    f_in: torch.Tensor,
    mask,
    generator: torch.Generator,
    n_samples: int = 1,
    resample: int = 0,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """Regenerate the voxels where ``mask == 1`` while keeping the rest of ``f_in``.

    ``resample`` > 0 repeats each step that many extra times after diffusing the
    result back by one step (off by default).
    """
    f_in = torch.as_tensor(f_in)
    if f_in.ndim != 4 or f_in.shape[0] != 4:
        raise ValueError(f"input field must be [4, N, N, N], got {list(f_in.shape)}")
    m = _mask_tensor(mask, f_in)
    shape = (n_samples, *f_in.shape)
    dtype = f_in.dtype
    f = _initial_noise(shape, generator, dtype)
    for t in range(s.T, 0, -1):
        for r in range(resample + 1):
            eps = _eps(net, f, t)
            if clip_denoised:
                eps = clipped_eps(f, eps, t, s)
            z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
            f_prev = completion_step(f, eps, t, s, f_in, m, z)
            if r < resample and t > 1:
                beta = float(s.at("beta", t))
                z2 = torch.randn(shape, generator=generator, dtype=dtype)
                f = math.sqrt(1.0 - beta) * f_prev + math.sqrt(beta) * z2
            else:
                f = f_prev
    # the known region is returned exactly
    return torch.where(m.bool().expand_as(f), f, f_in.expand_as(f))


@dataclass
class GuidanceTarget:
    image: torch.Tensor  # [3, H, W] in [0, 1]
    camera: Camera
    foreground: torch.Tensor  # [H, W] in {0, 1}
    weight: float = 0.1

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be >= 0")
        h, w = self.camera.height, self.camera.width
        if tuple(self.image.shape) != (3, h, w):
            raise ValueError(f"image shape {list(self.image.shape)} does not match camera [3, {h}, {w}]")
        if tuple(self.foreground.shape) != (h, w):
            raise ValueError(f"foreground mask shape {list(self.foreground.shape)} != image [{h}, {w}]")


def masked_target(target: GuidanceTarget, background) -> torch.Tensor:
    """The target image with everything outside the foreground replaced by the background."""
    bg = torch.as_tensor(background, dtype=target.image.dtype)[:, None, None]
    fg = target.foreground.to(target.image.dtype)[None]
    return fg * target.image + (1.0 - fg) * bg


def guidance_error(f0_est: torch.Tensor, target: GuidanceTarget, ref: torch.Tensor, render: RenderConfig):
    """Squared RGB error summed over all pixels of the render against ``ref`` ([P, 3])."""
    rgb, _, _ = render_pixels(f0_est, target.camera, all_pixels(target.camera), render)
    return ((rgb - ref) ** 2).sum()


def guidance_gradient(f0_est: torch.Tensor, target: GuidanceTarget, render: RenderConfig) -> torch.Tensor:
    ref = masked_target(target, render.background).to(f0_est.dtype).reshape(3, -1).T
    grads = []
    for i in range(f0_est.shape[0]):
        x = f0_est[i].detach().requires_grad_(True)
        with torch.enable_grad():
            err = guidance_error(x, target, ref, render)
            (g,) = torch.autograd.grad(err, x)
        grads.append(g)
    return torch.stack(grads)


def sample_guided(
    net: Denoiser,
    s: NoiseSchedule,
    target: GuidanceTarget,
    generator: torch.Generator,
    resolution: int,
    render: RenderConfig = RenderConfig(),
    n_samples: int = 1,
    clamp: bool = False,
    dtype=torch.float32,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """Unconditional chain whose denoised estimate is pushed down the rendering-error gradient.

    The corrected estimate f0' = f0 - weight * grad is turned back into a noise
    prediction eps' = (f_t - sqrt(ab) f0') / sqrt(1 - ab), which simplifies to
    eps + weight * sqrt(ab / (1 - ab)) * grad; that form keeps weight = 0
    bit-identical to the unguided chain.
    """
    shape = (n_samples, 4, resolution, resolution, resolution)
    f = _initial_noise(shape, generator, dtype)
    for t in range(s.T, 0, -1):
        eps = _eps(net, f, t)
        if clip_denoised:
            eps = clipped_eps(f, eps, t, s)
        if target.weight > 0:
            ab = float(s.at("alpha_bar", t))
            f0_est = estimate_f0(f, t, eps, s)
            g = guidance_gradient(f0_est, target, render)
            eps = eps + target.weight * math.sqrt(ab / (1.0 - ab)) * g
        z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else None
        f = unconditional_step(f, eps, t, s, z)
    return clamp_field(f) if clamp else f
