"""Conditional U-Net noise predictor.

Input is the fixed channel stack [background(3) | box mask(1) | noisy(3)];
the timestep embedding feeds every residual block, and the reference token
sequence is injected by cross-attention at the two lowest resolutions. The
token sequence carries no positional encoding, so attention treats it as a
set and reference order cannot change the output.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 7  # background(3) + mask(1) + noisy(3)
OUT_CHANNELS = 3


def _groups_for(channels: int) -> int:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return groups
    return 1


def _heads_for(channels: int, wanted: int) -> int:
    for heads in range(min(wanted, channels), 0, -1):
        if channels % heads == 0:
            return heads
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep features, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(device=t.device, dtype=torch.float64)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups_for(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups_for(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial queries attend over the conditioning token sequence."""

    def __init__(self, channels: int, cond_dim: int, heads: int = 4):
        super().__init__()
        self.heads = _heads_for(channels, heads)
        self.norm = nn.GroupNorm(_groups_for(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        flat = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(flat)
        k = self.to_k(cond)
        v = self.to_v(cond)
        head_dim = c // self.heads

        def split(z: torch.Tensor) -> torch.Tensor:
            return z.reshape(b, -1, self.heads, head_dim).transpose(1, 2)

        attn = F.scaled_dot_product_attention(split(q), split(k), split(v))
        attn = attn.transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(attn).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class ConditionalUNet(nn.Module):
    """3-level U-Net; widths ``channels``, cross-attention at H/2 and H/4."""

    def __init__(self, channels: tuple[int, int, int] = (64, 128, 256),
                 cond_dim: int = 128, time_dim: int = 256, heads: int = 4):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(IN_CHANNELS, c1, 3, padding=1)

        self.res_d1 = ResBlock(c1, c1, time_dim)
        self.down1 = Downsample(c1)
        self.res_d2 = ResBlock(c1, c2, time_dim)
        self.attn_d2 = CrossAttention(c2, cond_dim, heads)
        self.down2 = Downsample(c2)
        self.res_d3 = ResBlock(c2, c3, time_dim)
        self.attn_d3 = CrossAttention(c3, cond_dim, heads)

        self.res_m1 = ResBlock(c3, c3, time_dim)
        self.attn_m = CrossAttention(c3, cond_dim, heads)
        self.res_m2 = ResBlock(c3, c3, time_dim)

        self.res_u3 = ResBlock(c3 + c3, c2, time_dim)
        self.attn_u3 = CrossAttention(c2, cond_dim, heads)
        self.up2 = Upsample(c2)
        self.res_u2 = ResBlock(c2 + c2, c1, time_dim)
        self.attn_u2 = CrossAttention(c1, cond_dim, heads)
        self.up1 = Upsample(c1)
        self.res_u1 = ResBlock(c1 + c1, c1, time_dim)

        self.norm_out = nn.GroupNorm(_groups_for(c1), c1)
        self.conv_out = nn.Conv2d(c1, OUT_CHANNELS, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != IN_CHANNELS:
            raise ValueError(f"expected {IN_CHANNELS} input channels, got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {tuple(x.shape[2:])}")
        if cond.ndim != 3 or cond.shape[0] != x.shape[0] or cond.shape[2] != self.cond_dim:
            raise ValueError(
                f"conditioning must be (B, S, {self.cond_dim}), got {tuple(cond.shape)}")
        dtype = self.conv_in.weight.dtype
        t_emb = self.time_mlp(sinusoidal_embedding(t, self.time_dim).to(dtype))

        h0 = self.conv_in(x)
        h1 = self.res_d1(h0, t_emb)
        h2 = self.attn_d2(self.res_d2(self.down1(h1), t_emb), cond)
        h3 = self.attn_d3(self.res_d3(self.down2(h2), t_emb), cond)

        m = self.res_m1(h3, t_emb)
        m = self.attn_m(m, cond)
        m = self.res_m2(m, t_emb)

        u = self.attn_u3(self.res_u3(torch.cat([m, h3], dim=1), t_emb), cond)
        u = self.attn_u2(self.res_u2(torch.cat([self.up2(u), h2], dim=1), t_emb), cond)
        u = self.res_u1(torch.cat([self.up1(u), h1], dim=1), t_emb)
        return self.conv_out(F.silu(self.norm_out(u)))


def init_parameters(module: nn.Module, seed: int, zero_final: bool = True,
                    zero_cross_attn: bool = True) -> None:
    """Deterministically (re)initialize all parameters from ``seed``.

    Matrix-shaped weights get scaled normal draws, biases zero, norm gains
    one. With ``zero_final`` the last 3-channel projection starts at zero so
    an untrained denoiser predicts zero noise; with ``zero_cross_attn`` the
    cross-attention output projections start at zero so the conditioning
    pathway enters the residual stream only as training pulls it in.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        with torch.no_grad():
            if param.ndim == 1:
                if name.endswith(".bias") or name.endswith("_bias"):
                    param.zero_()
                else:
                    param.fill_(1.0)  # norm gains
            else:
                fan_in = param.numel() // param.shape[0] if param.shape[0] else 1
                std = 1.0 / math.sqrt(max(fan_in, 1))
                values = torch.randn(param.shape, generator=gen, dtype=torch.float64)
                param.copy_((values * std).to(param.dtype))
    if zero_cross_attn:
        for sub in module.modules():
            if isinstance(sub, CrossAttention):
                with torch.no_grad():
                    sub.proj.weight.zero_()
                    sub.proj.bias.zero_()
    if zero_final and hasattr(module, "conv_out"):
        with torch.no_grad():
            module.conv_out.weight.zero_()
            module.conv_out.bias.zero_()
