"""Forward corruption, one-shot denoised estimates and the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import Camera
from .renderer import RenderConfig, render_pixels
from .schedule import NoiseSchedule
from .tensor_core import check_same_shape

# below this rendering-loss weight the term is skipped (it is far under float precision)
OMEGA_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainingConfig:
    lambda_rgb: float = 1.0
    views_per_step: int = 4
    pixels_per_step: int = 8192
    batch_size: int = 8
    learning_rate: float = 1e-4
    # when set, the rate decays geometrically to this value over `iterations`
    final_learning_rate: float | None = None
    iterations: int = 1000
    seed: int = 0
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.lambda_rgb < 0:
            raise ValueError("lambda_rgb must be >= 0")
        for name in ("views_per_step", "pixels_per_step", "batch_size", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.final_learning_rate is not None and self.final_learning_rate <= 0:
            raise ValueError("final_learning_rate must be positive")


@dataclass
class TrainingSample:
    """A fitted field together with the posed images it was fitted to."""

    f0: torch.Tensor
    cameras: list[Camera]
    images: torch.Tensor  # [V, 3, H, W]

    def __post_init__(self):
        if len(self.cameras) != self.images.shape[0]:
            raise ValueError("number of cameras and images differ")


def _coef(s: NoiseSchedule, name: str, t, like: torch.Tensor) -> torch.Tensor:
    """Schedule coefficient(s) broadcast against a field or a batch of fields."""
    val = torch.as_tensor(np.asarray(s.at(name, np.asarray(t))), dtype=like.dtype)
    if val.ndim == 0:
        return val
    return val.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(f0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Sample q(f_t | f_0) with the supplied noise."""
    check_same_shape(f0, eps, "f0 and eps")
    ab = _coef(s, "alpha_bar", t, f0)
    return torch.sqrt(ab) * f0 + torch.sqrt(1.0 - ab) * eps


def forward_step(f_prev: torch.Tensor, t: int, z: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One transition of the corruption chain, q(f_t | f_{t-1})."""
    check_same_shape(f_prev, z, "f_{t-1} and z")
    beta = float(s.at("beta", t))
    return math.sqrt(1.0 - beta) * f_prev + math.sqrt(beta) * z


def estimate_f0(f_t: torch.Tensor, t, eps_pred: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    check_same_shape(f_t, eps_pred, "f_t and eps_pred")
    ab = _coef(s, "alpha_bar", t, f_t)
    return (f_t - torch.sqrt(1.0 - ab) * eps_pred) / torch.sqrt(ab)


def loss_rf(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    check_same_shape(eps, eps_pred, "eps and eps_pred")
    return ((eps - eps_pred) ** 2).mean()


def draw_views_and_pixels(sample: TrainingSample, cfg: TrainingConfig, generator: torch.Generator):
    """Uniform viewpoints and pixels for one rendering-loss evaluation."""
    n_views = len(sample.cameras)
    if n_views == 0:
        raise ValueError("training sample has no views")
    k = min(cfg.views_per_step, n_views)
    views = torch.randperm(n_views, generator=generator)[:k].tolist()
    per_view = max(1, cfg.pixels_per_step // k)
    out = []
    for v in views:
        cam = sample.cameras[v]
        idx = torch.randint(0, cam.width * cam.height, (per_view,), generator=generator)
        pix = np.stack([(idx % cam.width).numpy(), (idx // cam.width).numpy()], axis=-1)
        out.append((v, pix))
    return out


def rendering_error(f0_est: torch.Tensor, sample: TrainingSample, draws, render: RenderConfig, generator=None):
    """Mean over the drawn views of the per-pixel squared RGB error."""
    errs = []
    for v, pix in draws:
        cam = sample.cameras[v]
        rgb, _, _ = render_pixels(f0_est, cam, pix, render, generator)
        pix_t = torch.as_tensor(pix, dtype=torch.long)
        ref = sample.images[v][:, pix_t[:, 1], pix_t[:, 0]].T.to(rgb.dtype)
        errs.append(((rgb - ref) ** 2).sum(dim=-1).mean())
    return torch.stack(errs).mean()


def loss_rgb(
    f0_est: torch.Tensor,
    sample: TrainingSample,
    t: int,
    s: NoiseSchedule,
    cfg: TrainingConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """omega_t times the photometric error of the denoised estimate on random views."""
    if len(sample.cameras) == 0:
        raise ValueError("training sample has no views")
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    omega = float(s.at("omega", t))
    draws = draw_views_and_pixels(sample, cfg, generator)
    return omega * rendering_error(f0_est, sample, draws, cfg.render, generator)


def compute_losses(
    batch: list[TrainingSample],
    net: torch.nn.Module,
    s: NoiseSchedule,
    cfg: TrainingConfig,
    generator: torch.Generator,
):
    """Per-sample (loss_rf, loss_rgb, t) for one stochastic draw of steps and noise."""
    f0 = torch.stack([b.f0 for b in batch])
    t = torch.randint(1, s.T + 1, (len(batch),), generator=generator)
    eps = torch.randn(f0.shape, generator=generator, dtype=f0.dtype)
    f_t = forward_diffuse(f0, t.numpy(), eps, s)
    eps_pred = net(f_t, t)
    rf = ((eps - eps_pred) ** 2).flatten(1).mean(dim=1)
    rgb = torch.zeros_like(rf)
    if cfg.lambda_rgb > 0:
        f0_est = estimate_f0(f_t, t.numpy(), eps_pred, s)
        terms = []
        for i, sample in enumerate(batch):
            ti = int(t[i])
            if float(s.at("omega", ti)) > OMEGA_FLOOR:
                terms.append(loss_rgb(f0_est[i], sample, ti, s, cfg, generator))
            else:
                terms.append(torch.zeros((), dtype=rf.dtype))
        rgb = torch.stack(terms)
    return rf, rgb, t


def train_step(
    batch: list[TrainingSample],
    net: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    s: NoiseSchedule,
    cfg: TrainingConfig,
    generator: torch.Generator,
) -> dict:
    """One Adam update on the combined objective; returns the pre-update losses."""
    if not batch:
        raise ValueError("empty batch")
    rf, rgb, t = compute_losses(batch, net, s, cfg, generator)
    total = (rf + cfg.lambda_rgb * rgb).mean()
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite training loss {total.item()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "loss_rf": rf.mean().item(),
        "loss_rgb": rgb.mean().item(),
        "total": total.item(),
        "t": t.tolist(),
        "rf_per_sample": rf.detach().tolist(),
    }
