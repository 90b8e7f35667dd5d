"""Conditional denoising diffusion core.

Images live in [0, 1] on disk and in [-1, 1] inside the diffusion process
(background conditioning channels included; the mask stays {0, 1}). The
sampler is DDIM; at eta=0 it is fully deterministic given the seed. Sampled
composites paste the original background back outside a dilated, feathered
box, so background preservation holds exactly by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .dataprep import BBox, bbox_mask
from .encoder import ConditioningTokens
from .validation import ensure_binary_mask, ensure_image


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached cumulative alpha products."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self) -> None:
        if self.T < 2:
            raise ValueError(f"schedule needs T >= 2, got {self.T}")
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ValueError("betas and alpha_bars must have length T")
        if self.betas.min() <= 0.0 or self.betas.max() >= 1.0:
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.betas) <= 0.0):
            raise ValueError("betas must be strictly increasing")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if self.alpha_bars.min() <= 0.0 or self.alpha_bars.max() >= 1.0:
            raise ValueError("alpha_bars must lie strictly inside (0, 1)")
        if not np.isclose(self.alpha_bars[0], 1.0 - self.betas[0], rtol=0, atol=1e-12):
            raise ValueError("alpha_bars[0] must equal 1 - betas[0]")

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear schedule; alpha_bars[t] is the running product of 1 - beta."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def to_signal(image: torch.Tensor | np.ndarray) -> torch.Tensor | np.ndarray:
    """Map [0, 1] pixels to the [-1, 1] diffusion domain."""
    return image * 2.0 - 1.0


def from_signal(signal: torch.Tensor | np.ndarray) -> torch.Tensor | np.ndarray:
    """Map [-1, 1] diffusion values back to clipped [0, 1] pixels."""
    half = (signal + 1.0) / 2.0
    if isinstance(half, torch.Tensor):
        return half.clamp(0.0, 1.0)
    return np.clip(half, 0.0, 1.0)


def _gather_alpha_bar(schedule: NoiseSchedule, t: torch.Tensor,
                      dtype: torch.dtype) -> torch.Tensor:
    if t.min() < 0 or t.max() >= schedule.T:
        raise ValueError(f"timestep outside [0, {schedule.T})")
    table = torch.from_numpy(schedule.alpha_bars).to(dtype)
    return table[t]


def forward_diffuse(z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process: sqrt(a_bar)*z0 + sqrt(1 - a_bar)*eps.

    ``t`` may be a scalar or a per-sample tensor indexing the leading axis.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, (int, np.integer)):
        a_bar = torch.tensor(schedule.alpha_bar(int(t)), dtype=z0.dtype)
        return torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps
    a_bar = _gather_alpha_bar(schedule, t, z0.dtype)
    shape = (-1,) + (1,) * (z0.ndim - 1)
    a_bar = a_bar.reshape(shape)
    return torch.sqrt(a_bar) * z0 + torch.sqrt(1.0 - a_bar) * eps


@dataclass
class DenoiserInput:
    """Batched denoiser input; background and noisy live in [-1, 1].

    The channel stack order is fixed: [background(3) | mask(1) | noisy(3)].
    """

    noisy: torch.Tensor       # (B, 3, H, W)
    background: torch.Tensor  # (B, 3, H, W)
    mask: torch.Tensor        # (B, 1, H, W)
    timestep: torch.Tensor    # (B,) long
    cond: torch.Tensor        # (B, S, D)

    def __post_init__(self) -> None:
        b, _, h, w = self.noisy.shape
        if self.noisy.shape[1] != 3 or self.background.shape != self.noisy.shape:
            raise ValueError("noisy and background must both be (B, 3, H, W)")
        if self.mask.shape != (b, 1, h, w):
            raise ValueError(f"mask must be (B, 1, H, W), got {tuple(self.mask.shape)}")
        if self.timestep.shape != (b,):
            raise ValueError("timestep must be a (B,) tensor")
        if self.cond.ndim != 3 or self.cond.shape[0] != b:
            raise ValueError("cond must be (B, S, D)")

    def to_stack(self) -> torch.Tensor:
        return torch.cat([self.background, self.mask, self.noisy], dim=1)


def unet_forward(inp: DenoiserInput, unet: torch.nn.Module) -> torch.Tensor:
    """Run the denoiser on a DenoiserInput, checking the output contract."""
    eps_hat = unet(inp.to_stack(), inp.timestep, inp.cond)
    if eps_hat.shape != inp.noisy.shape:
        raise ValueError(
            f"denoiser output {tuple(eps_hat.shape)} != noisy {tuple(inp.noisy.shape)}")
    if not bool(torch.isfinite(eps_hat).all()):
        raise ValueError("denoiser produced non-finite values")
    return eps_hat


def denoising_loss(predict, z0: torch.Tensor, background: torch.Tensor,
                   mask: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction MSE for a fixed draw of (t, eps).

    ``predict`` is any callable with the denoiser signature (stack, t, cond);
    keeping the draw explicit makes the loss a deterministic function that
    oracle predictors and finite differences can probe.
    """
    z_t = forward_diffuse(z0, t, eps, schedule)
    inp = DenoiserInput(noisy=z_t, background=background, mask=mask,
                        timestep=t, cond=cond)
    eps_hat = predict(inp.to_stack(), inp.timestep, inp.cond)
    return F.mse_loss(eps_hat, eps)


def draw_t_eps(batch: int, shape: tuple[int, ...], schedule: NoiseSchedule,
               generator: torch.Generator,
               dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample per-item timesteps and unit Gaussian noise from ``generator``."""
    t = torch.randint(0, schedule.T, (batch,), generator=generator)
    eps = torch.randn((batch,) + shape, generator=generator, dtype=dtype)
    return t, eps


def batch_from_samples(samples, dtype: torch.dtype = torch.float32):
    """Stack CompositionSamples into (z0, background, mask, refs) tensors.

    Ground truth and background are mapped to [-1, 1]; references stay in
    [0, 1] and come out as (B, K, 3, R, R). Every sample must share the same
    image size and reference count.
    """
    if not samples:
        raise ValueError("empty batch")
    k = len(samples[0].references)
    shape = samples[0].ground_truth.shape
    for s in samples:
        if s.ground_truth.shape != shape or len(s.references) != k:
            raise ValueError("batch samples must share image size and reference count")

    def stack_images(arrays):
        stacked = np.stack([np.asarray(a, dtype=np.float32).transpose(2, 0, 1)
                            for a in arrays])
        return torch.from_numpy(stacked).to(dtype)

    z0 = to_signal(stack_images([s.ground_truth for s in samples]))
    background = to_signal(stack_images([s.background for s in samples]))
    mask = torch.from_numpy(
        np.stack([np.asarray(s.mask, dtype=np.float32)[None] for s in samples])
    ).to(dtype)
    refs = torch.stack([
        stack_images([r.pixels for r in s.references]) for s in samples])
    return z0, background, mask, refs


def training_loss(model, samples, schedule: NoiseSchedule,
                  generator: torch.Generator) -> torch.Tensor:
    """One stochastic noise-prediction loss over a batch of samples.

    Draws per-sample uniform timesteps and unit Gaussian noise from the
    supplied generator, encodes the reference sets, and scores the denoiser.
    ``model`` must expose ``encode_ref_batch`` and ``unet``.
    """
    dtype = next(model.parameters()).dtype
    z0, background, mask, refs = batch_from_samples(samples, dtype)
    cond = model.encode_ref_batch(refs)
    t, eps = draw_t_eps(z0.shape[0], tuple(z0.shape[1:]), schedule, generator, dtype)
    return denoising_loss(model.unet, z0, background, mask, cond, t, eps, schedule)


def soft_box_mask(bbox: BBox, height: int, width: int,
                  dilate: int = 4, feather: int = 4) -> np.ndarray:
    """Box mask dilated by ``dilate`` px with a ``feather``-px linear ramp.

    Exactly zero outside the dilated rectangle and exactly one on the
    original box, ramping linearly across the dilation band.
    """
    bbox.validate_within(height, width)
    if dilate < 0 or feather < 1:
        raise ValueError("dilate must be >= 0 and feather >= 1")
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    x0, x1 = bbox.x - dilate, bbox.x + bbox.w - 1 + dilate
    y0, y1 = bbox.y - dilate, bbox.y + bbox.h - 1 + dilate
    depth_x = np.minimum(xs - x0 + 1.0, x1 - xs + 1.0)
    depth_y = np.minimum(ys - y0 + 1.0, y1 - ys + 1.0)
    weight = np.minimum(depth_x[None, :], depth_y[:, None]) / feather
    return np.clip(weight, 0.0, 1.0).astype(np.float32)


def bbox_from_mask(mask: np.ndarray) -> BBox:
    """Recover the box from a rasterized rectangle mask; rejects other shapes."""
    ensure_binary_mask(mask, "mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask is empty")
    bbox = BBox(int(cols[0]), int(rows[0]),
                int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
    if not np.array_equal(mask.astype(np.float32),
                          bbox_mask(bbox, *mask.shape)):
        raise ValueError("mask must be a filled axis-aligned rectangle")
    return bbox


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return np.linspace(T - 1, 0, steps).round().astype(np.int64)


@torch.no_grad()
def sample(background: np.ndarray, mask: np.ndarray, cond: ConditioningTokens,
           unet: torch.nn.Module, schedule: NoiseSchedule, seed: int,
           steps: int = 50, eta: float = 0.0,
           dilate: int = 4, feather: int = 4) -> np.ndarray:
    """Generate one composite: DDIM from seeded noise, then feathered paste.

    Returns a float32 [0, 1] image that equals ``background`` exactly outside
    the dilated box.
    """
    ensure_image(background, "background")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    box = bbox_from_mask(mask)
    h, w = background.shape[:2]
    timesteps = ddim_timesteps(schedule.T, steps)

    dtype = next(unet.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    bg = torch.from_numpy(
        np.ascontiguousarray(background.transpose(2, 0, 1))
    ).to(dtype).unsqueeze(0)
    bg = to_signal(bg)
    mask_t = torch.from_numpy(np.asarray(mask, dtype=np.float32)).to(dtype)
    mask_t = mask_t.reshape(1, 1, h, w)
    tokens = cond.tokens.to(dtype).unsqueeze(0)

    z = torch.randn((1, 3, h, w), generator=gen, dtype=dtype)
    for i, t in enumerate(timesteps):
        t_tensor = torch.full((1,), int(t), dtype=torch.long)
        inp = DenoiserInput(noisy=z, background=bg, mask=mask_t,
                            timestep=t_tensor, cond=tokens)
        eps_hat = unet_forward(inp, unet)
        a_bar = schedule.alpha_bar(int(t))
        x0_hat = (z - np.sqrt(1.0 - a_bar) * eps_hat) / np.sqrt(a_bar)
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        if i == len(timesteps) - 1:
            z = x0_hat
            break
        a_prev = schedule.alpha_bar(int(timesteps[i + 1]))
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_bar)) * np.sqrt(1.0 - a_bar / a_prev)
        direction = np.sqrt(max(1.0 - a_prev - sigma**2, 0.0)) * eps_hat
        z = np.sqrt(a_prev) * x0_hat + direction
        if eta > 0.0:
            z = z + sigma * torch.randn(z.shape, generator=gen, dtype=dtype)

    generated = from_signal(z[0]).to(torch.float32).numpy().transpose(1, 2, 0)
    soft = soft_box_mask(box, h, w, dilate, feather)[:, :, None]
    bg32 = np.asarray(background, dtype=np.float32)
    return bg32 * (1.0 - soft) + generated * soft
