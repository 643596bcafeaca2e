"""Explicit voxel radiance fields.

A field is a ``[4, N, N, N]`` tensor of pre-activated values laid out as
``[channel, z, y, x]`` over the cube [-1, 1]^3. Channel 0 is density, 1..3 are
RGB. Grid vertices sit at voxel centres, ``-1 + (i + 0.5) * 2 / N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

CHANNELS = 4
# pre-activation returned for points outside the domain: zero density, black
VACUUM_DENSITY = -1e4
VACUUM_COLOR = -1.0


@dataclass(frozen=True)
class ActivationConfig:
    density_scale: float = 25.0
    density_sharpness: float = 6.0

    def __post_init__(self):
        if self.density_scale <= 0 or self.density_sharpness <= 0:
            raise ValueError("density_scale and density_sharpness must be positive")


@dataclass
class RadianceField:
    values: torch.Tensor

    def __post_init__(self):
        v = self.values
        if v.ndim != 4 or v.shape[0] != CHANNELS or not (v.shape[1] == v.shape[2] == v.shape[3]):
            raise ValueError(f"field must have shape [4, N, N, N], got {list(v.shape)}")

    @property
    def resolution(self) -> int:
        return int(self.values.shape[1])

    @classmethod
    def zeros(cls, n: int, dtype=torch.float32) -> "RadianceField":
        return cls(torch.zeros(CHANNELS, n, n, n, dtype=dtype))

    def clone(self) -> "RadianceField":
        return RadianceField(self.values.detach().clone())


def voxel_centers(n: int, dtype=torch.float32) -> torch.Tensor:
    return -1.0 + (torch.arange(n, dtype=dtype) + 0.5) * (2.0 / n)


def sample_field(values: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup of pre-activated values.

    values: ``[C, N, N, N]`` (or a RadianceField); points: ``[..., 3]`` as (x, y, z).
    Returns ``[..., C]``. Points between the outermost vertex and the cube face
    take the edge value; points outside the cube get the vacuum value.
    """
    if isinstance(values, RadianceField):
        values = values.values
    c = values.shape[0]
    lead = points.shape[:-1]
    pts = points.reshape(1, -1, 1, 1, 3).to(values.dtype)
    # align_corners=False puts vertex i at -1 + (i + .5) * 2 / N, matching our convention
    out = F.grid_sample(
        values.unsqueeze(0), pts, mode="bilinear", padding_mode="border", align_corners=False
    )
    out = out.reshape(c, -1).T
    inside = (points.reshape(-1, 3).abs() <= 1.0).all(dim=-1, keepdim=True)
    vac = torch.full((1, c), VACUUM_COLOR, dtype=values.dtype)
    vac[0, 0] = VACUUM_DENSITY
    out = torch.where(inside, out, vac)
    return out.reshape(*lead, c)


def activate_density(pre: torch.Tensor, cfg: ActivationConfig = ActivationConfig()) -> torch.Tensor:
    return cfg.density_scale * F.softplus(cfg.density_sharpness * pre)


class _ClampColor(torch.autograd.Function):
    # zero gradient at and beyond the clamp, identity strictly inside
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * ((x > 0.0) & (x < 1.0)).to(g.dtype)


def activate_color(pre: torch.Tensor) -> torch.Tensor:
    return _ClampColor.apply((pre + 1.0) * 0.5)


def activate(pre: torch.Tensor, cfg: ActivationConfig = ActivationConfig()):
    """Split ``[..., 4]`` pre-activations into (sigma ``[...]``, rgb ``[..., 3]``)."""
    return activate_density(pre[..., 0], cfg), activate_color(pre[..., 1:])


def clamp_field(f):
    if isinstance(f, RadianceField):
        return RadianceField(f.values.clamp(-1.0, 1.0))
    return f.clamp(-1.0, 1.0)


def default_iso(cfg: ActivationConfig = ActivationConfig()) -> float:
    """Half the density of a zero pre-activation."""
    return 0.5 * cfg.density_scale * float(F.softplus(torch.tensor(0.0, dtype=torch.float64)))
