"""Time-conditioned 3D U-Net noise predictor.

Layout per level: ``resnet_blocks`` residual blocks (GroupNorm, SiLU, 3^3 conv,
timestep embedding added as a per-channel bias), optional self-attention after
the last block, then 2^3 average pooling. The decoder mirrors it with skip
concatenation and nearest-neighbour upsampling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    resnet_blocks_per_level: int = 2
    attention_levels: tuple[int, ...] = (4,)
    attention_head_channels: int = 8
    time_embed_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_levels", tuple(sorted(self.attention_levels)))
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        if (
            self.base_channels < 1
            or not self.channel_multipliers
            or min(self.channel_multipliers) < 1
            or self.resnet_blocks_per_level < 1
            or self.attention_head_channels < 1
            or self.time_embed_dim < 1
        ):
            raise ValueError(f"invalid denoiser config {self}")
        for lvl in self.attention_levels:
            if lvl < 1 or lvl & (lvl - 1):
                raise ValueError(f"attention level {lvl} is not a power-of-two factor")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def level_factor(self, i: int) -> int:
        return 2**i

    def check_resolution(self, n: int) -> None:
        div = 2 ** (self.levels - 1)
        if n % div:
            raise ValueError(f"resolution {n} is not divisible by {div} ({self.levels} levels)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def groups_for(ch: int) -> int:
    g = min(8, ch)
    while ch % g:
        g -= 1
    return g


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps ``t`` ([B]) -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _conv(cin: int, cout: int, k: int) -> nn.Conv3d:
    conv = nn.Conv3d(cin, cout, k, padding=k // 2)
    nn.init.normal_(conv.weight, 0.0, math.sqrt(1.0 / (cin * k**3)))
    nn.init.zeros_(conv.bias)
    return conv


def _linear(cin: int, cout: int) -> nn.Linear:
    lin = nn.Linear(cin, cout)
    nn.init.normal_(lin.weight, 0.0, math.sqrt(1.0 / cin))
    nn.init.zeros_(lin.bias)
    return lin


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups_for(cin), cin)
        self.conv1 = _conv(cin, cout, 3)
        self.temb = _linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups_for(cout), cout)
        self.conv2 = _conv(cout, cout, 3)
        self.skip = _conv(cin, cout, 1) if cin != cout else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        # the time bias goes in after the norm: with one or two channels per
        # group, a bias added before it would be subtracted right back out
        h = self.norm2(h) + self.temb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(h))
        return (x if self.skip is None else self.skip(x)) + h


class AttentionBlock(nn.Module):
    """Multi-head self-attention over all voxels of a feature map."""

    def __init__(self, ch: int, head_channels: int):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = nn.GroupNorm(groups_for(ch), ch)
        self.qkv = _conv(ch, 3 * ch, 1)
        self.proj = _conv(ch, ch, 1)

    def forward(self, x, emb=None):
        b, c, *sp = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b * self.heads, 3 * c // self.heads, -1)
        q, k, v = qkv.chunk(3, dim=1)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q * scale, k), dim=-1)
        h = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, *sp)
        return x + self.proj(h)


class UNet3D(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        ch0 = cfg.base_channels
        temb = cfg.time_embed_dim
        self.time_mlp = nn.ModuleList([_linear(ch0, temb), _linear(temb, temb)])
        self.inp = _conv(IN_CHANNELS, ch0, 3)

        self.down = nn.ModuleList()
        skips = [ch0]
        ch = ch0
        for i, mult in enumerate(cfg.channel_multipliers):
            blocks = nn.ModuleList()
            for _ in range(cfg.resnet_blocks_per_level):
                blocks.append(ResBlock(ch, ch0 * mult, temb))
                ch = ch0 * mult
                skips.append(ch)
            if cfg.level_factor(i) in cfg.attention_levels:
                blocks.append(AttentionBlock(ch, cfg.attention_head_channels))
            self.down.append(blocks)
            if i < cfg.levels - 1:
                skips.append(ch)

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb), ResBlock(ch, ch, temb)])

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            blocks = nn.ModuleList()
            for _ in range(cfg.resnet_blocks_per_level + 1):
                blocks.append(ResBlock(ch + skips.pop(), ch0 * mult, temb))
                ch = ch0 * mult
            if cfg.level_factor(i) in cfg.attention_levels:
                blocks.append(AttentionBlock(ch, cfg.attention_head_channels))
            self.up.append(blocks)

        self.out_norm = nn.GroupNorm(groups_for(ch), ch)
        self.out = nn.Conv3d(ch, IN_CHANNELS, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embed(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.cfg.base_channels).to(self.inp.weight.dtype)
        return self.time_mlp[1](F.silu(self.time_mlp[0](emb)))

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        """x: ``[B, 4, N, N, N]`` (or unbatched ``[4, N, N, N]``); t: int or ``[B]``."""
        unbatched = x.ndim == 4
        if unbatched:
            x = x.unsqueeze(0)
        if x.ndim != 5 or x.shape[1] != IN_CHANNELS:
            raise ValueError(f"expected [B, 4, N, N, N] input, got {list(x.shape)}")
        n = x.shape[-1]
        if not x.shape[-3] == x.shape[-2] == n:
            raise ValueError(f"input grid must be cubic, got {list(x.shape[-3:])}")
        self.cfg.check_resolution(n)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        emb = self.embed(t)

        h = self.inp(x)
        hs = [h]
        for i, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, emb)
                if isinstance(blk, ResBlock):
                    hs.append(h)
                else:
                    hs[-1] = h
            if i < len(self.down) - 1:
                h = F.avg_pool3d(h, 2)
                hs.append(h)
        for blk in self.mid:
            h = blk(h, emb)
        for j, blocks in enumerate(self.up):
            for blk in blocks:
                if isinstance(blk, ResBlock):
                    h = blk(torch.cat([h, hs.pop()], dim=1), emb)
                else:
                    h = blk(h, emb)
            if j < len(self.up) - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        out = self.out(F.silu(self.out_norm(h)))
        return out[0] if unbatched else out


def build_denoiser(cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0, dtype=torch.float32) -> UNet3D:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = UNet3D(cfg).to(dtype)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def parameter_count(cfg: DenoiserConfig = DenoiserConfig()) -> int:
    """Parameter count derived from the architecture description alone."""
    temb = cfg.time_embed_dim
    ch0 = cfg.base_channels

    def conv(cin, cout, k):
        return cin * cout * k**3 + cout

    def norm(c):
        return 2 * c

    def res(cin, cout):
        n = norm(cin) + conv(cin, cout, 3) + temb * cout + cout + norm(cout) + conv(cout, cout, 3)
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    def attn(c):
        return norm(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    total = ch0 * temb + temb + temb * temb + temb
    total += conv(IN_CHANNELS, ch0, 3)
    skips = [ch0]
    ch = ch0
    for i, mult in enumerate(cfg.channel_multipliers):
        for _ in range(cfg.resnet_blocks_per_level):
            total += res(ch, ch0 * mult)
            ch = ch0 * mult
            skips.append(ch)
        if cfg.level_factor(i) in cfg.attention_levels:
            total += attn(ch)
        if i < cfg.levels - 1:
            skips.append(ch)
    total += 2 * res(ch, ch)
    for i, mult in reversed(list(enumerate(cfg.channel_multipliers))):
        for _ in range(cfg.resnet_blocks_per_level + 1):
            total += res(ch + skips.pop(), ch0 * mult)
            ch = ch0 * mult
        if cfg.level_factor(i) in cfg.attention_levels:
            total += attn(ch)
    total += norm(ch) + conv(ch, IN_CHANNELS, 3)
    return total
