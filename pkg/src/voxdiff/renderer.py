"""Differentiable volume rendering of voxel radiance fields.

The ray integral is discretised with the usual alpha-compositing quadrature:
``n_steps`` samples at ``s_i = near + (i + u_i) * delta`` with u_i = 0 (or
uniform jitter), ``alpha_i = 1 - exp(-sigma_i * delta)`` and transmittance
``T_i = exp(-sum_{j<i} sigma_j * delta)``. Residual transmittance blends in the
background colour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera, Rays, all_pixels, pixel_rays
from .grid_field import ActivationConfig, RadianceField, activate, sample_field
from .tensor_core import ShapeError

CHUNK = 8192
DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class RenderConfig:
    n_steps: int = 92
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    jitter: bool = False
    activation: ActivationConfig = ActivationConfig()

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")


@dataclass
class RenderedImage:
    rgb: torch.Tensor
    alpha: torch.Tensor | None = None
    depth: torch.Tensor | None = None

    @property
    def height(self) -> int:
        return int(self.rgb.shape[1])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[2])


def _values(f) -> torch.Tensor:
    return f.values if isinstance(f, RadianceField) else f


def composite_weights(sigma: torch.Tensor, delta: torch.Tensor):
    """Per-sample weights T_i * alpha_i and the residual transmittance.

    sigma: ``[R, S]`` activated densities, delta: ``[R]`` step lengths.
    """
    tau = sigma * delta[:, None]
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=-1))
    t_final = torch.exp(-acc[:, -1])
    return trans * alpha, trans, t_final


def render_rays(f, rays: Rays, cfg: RenderConfig = RenderConfig(), generator=None):
    """Render a batch of rays. Returns (rgb ``[R, 3]``, alpha ``[R]``, depth ``[R]``)."""
    values = _values(f)
    dtype = values.dtype
    o = rays.origins.to(dtype)
    d = rays.directions.to(dtype)
    near = rays.near.to(dtype)
    far = torch.where(rays.hit, rays.far.to(dtype), near)
    n = cfg.n_steps
    delta = (far - near) / n
    if cfg.jitter:
        offs = torch.rand(len(rays), n, generator=generator, dtype=dtype)
    else:
        offs = torch.zeros(len(rays), n, dtype=dtype)
    s = near[:, None] + (torch.arange(n, dtype=dtype) + offs) * delta[:, None]
    pts = o[:, None, :] + s[..., None] * d[:, None, :]
    pre = sample_field(values, pts)
    sigma, color = activate(pre, cfg.activation)
    w, _, t_final = composite_weights(sigma, delta)
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    rgb = (w[..., None] * color).sum(dim=1) + t_final[:, None] * bg
    alpha = 1.0 - t_final
    depth = (w * s).sum(dim=1) / alpha.clamp_min(DEPTH_EPS)
    return rgb, alpha, depth


def render_pixels(f, cam: Camera, pixels, cfg: RenderConfig = RenderConfig(), generator=None):
    values = _values(f)
    rays = pixel_rays(cam, pixels, dtype=values.dtype)
    outs = [[], [], []]
    for start in range(0, len(rays), CHUNK):
        sl = slice(start, start + CHUNK)
        sub = Rays(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl], rays.hit[sl])
        for acc, val in zip(outs, render_rays(values, sub, cfg, generator)):
            acc.append(val)
    return tuple(torch.cat(x) for x in outs)


def render_image(f, cam: Camera, cfg: RenderConfig = RenderConfig(), generator=None) -> RenderedImage:
    rgb, alpha, depth = render_pixels(f, cam, all_pixels(cam), cfg, generator)
    h, w = cam.height, cam.width
    return RenderedImage(
        rgb=rgb.T.reshape(3, h, w), alpha=alpha.reshape(h, w), depth=depth.reshape(h, w)
    )


def gather_pixels(image: torch.Tensor, pixels) -> torch.Tensor:
    """Pick ``[P, 3]`` colours from a ``[3, H, W]`` image at (u, v) pixels."""
    pix = torch.as_tensor(np.asarray(pixels), dtype=torch.long).reshape(-1, 2)
    return image[:, pix[:, 1], pix[:, 0]].T


def photometric_loss(
    f,
    cam: Camera,
    target: torch.Tensor,
    pixel_subset=None,
    cfg: RenderConfig = RenderConfig(),
    generator=None,
) -> torch.Tensor:
    """Sum of squared RGB differences per pixel, averaged over the pixels used."""
    target = torch.as_tensor(target)
    if tuple(target.shape) != (3, cam.height, cam.width):
        raise ShapeError(
            f"target image shape {list(target.shape)} does not match camera "
            f"[3, {cam.height}, {cam.width}]"
        )
    pixels = all_pixels(cam) if pixel_subset is None else np.asarray(pixel_subset)
    rgb, _, _ = render_pixels(f, cam, pixels, cfg, generator)
    ref = gather_pixels(target, pixels).to(rgb.dtype)
    return ((rgb - ref) ** 2).sum(dim=-1).mean()
