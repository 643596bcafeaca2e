"""Direct voxel optimisation of a radiance field from posed images."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import Camera
from .dataset_io import DataError, Scene
from .grid_field import clamp_field
from .metrics import psnr
from .renderer import RenderConfig, render_image, render_pixels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    learning_rate: float = 0.1
    final_learning_rate: float = 0.005
    pixels_per_step: int = 8192
    views_per_step: int = 4
    tv_weight: float = 1e-4
    resolution: int = 32
    render: RenderConfig = field(default_factory=lambda: RenderConfig(jitter=True))

    def __post_init__(self):
        for name in ("iterations", "pixels_per_step", "views_per_step", "resolution"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.final_learning_rate <= 0 or self.tv_weight < 0:
            raise ValueError("learning rates must be positive and tv_weight >= 0")


def total_variation(values: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between neighbouring voxels, over all three axes."""
    dz = values[:, 1:] - values[:, :-1]
    dy = values[:, :, 1:] - values[:, :, :-1]
    dx = values[:, :, :, 1:] - values[:, :, :, :-1]
    return (dz**2).mean() + (dy**2).mean() + (dx**2).mean()


def _validate(scene: Scene) -> None:
    if len(scene.cameras) < 2:
        raise DataError("fitting needs at least two posed views")
    h, w = scene.images.shape[-2:]
    for i, cam in enumerate(scene.cameras):
        if (cam.height, cam.width) != (h, w):
            raise DataError(f"view {i} is {cam.width}x{cam.height}, others are {w}x{h}")


def fit_field(scene: Scene, cfg: FitConfig = FitConfig(), seed: int = 0, history: list | None = None) -> torch.Tensor:
    """Fit a ``[4, N, N, N]`` field to ``scene``; deterministic given ``seed``.

    Starts from zero pre-activations and takes Adam steps on the photometric
    loss of random view/pixel minibatches plus total variation. Values are
    projected back onto [-1, 1] after every step.
    """
    _validate(scene)
    gen = torch.Generator().manual_seed(seed)
    n = cfg.resolution
    values = torch.zeros(4, n, n, n, requires_grad=True)
    opt = torch.optim.Adam([values], lr=cfg.learning_rate)
    decay = (cfg.final_learning_rate / cfg.learning_rate) ** (1.0 / max(cfg.iterations - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=decay)
    render = RenderConfig(
        n_steps=cfg.render.n_steps,
        background=tuple(scene.background),
        jitter=cfg.render.jitter,
        activation=cfg.render.activation,
    )
    n_views = len(scene.cameras)
    k = min(cfg.views_per_step, n_views)
    per_view = max(1, cfg.pixels_per_step // k)
    h, w = scene.images.shape[-2:]
    for it in range(cfg.iterations):
        views = torch.randperm(n_views, generator=gen)[:k].tolist()
        errs = []
        for v in views:
            idx = torch.randint(0, h * w, (per_view,), generator=gen)
            pix = np.stack([(idx % w).numpy(), (idx // w).numpy()], axis=-1)
            rgb, _, _ = render_pixels(values, scene.cameras[v], pix, render, gen)
            ref = scene.images[v][:, idx // w, idx % w].T
            errs.append(((rgb - ref) ** 2).sum(dim=-1).mean())
        photo = torch.stack(errs).mean()
        loss = photo + cfg.tv_weight * total_variation(values)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        with torch.no_grad():
            values.clamp_(-1.0, 1.0)
        if history is not None:
            history.append(photo.item())
        if it % 200 == 0:
            log.info("fit iter %d photometric %.6f", it, photo.item())
    return clamp_field(values.detach())


def evaluate_views(values, cameras: list[Camera], images: torch.Tensor, cfg: RenderConfig = RenderConfig()):
    """PSNR of ``values`` rendered against each (camera, image) pair."""
    out = []
    with torch.no_grad():
        for cam, img in zip(cameras, images):
            out.append(psnr(render_image(values, cam, cfg).rgb, img))
    return out
