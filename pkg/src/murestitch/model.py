"""Full conditional compositor: reference encoder plus denoising U-Net."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .dataprep import ReferenceImage
from .encoder import ConditioningTokens, PatchEncoder, encode_references
from .unet import ConditionalUNet, init_parameters


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    ref_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    token_dim: int = 128
    encoder_depth: int = 2
    encoder_heads: int = 4
    unet_channels: tuple[int, int, int] = (64, 128, 256)
    time_dim: int = 256
    unet_heads: int = 4

    def __post_init__(self) -> None:
        if self.image_size % 4 != 0:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.ref_size % self.patch_size != 0:
            raise ValueError(
                f"ref_size {self.ref_size} not divisible by patch_size {self.patch_size}")
        if len(self.unet_channels) != 3:
            raise ValueError("unet_channels must list exactly 3 widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["unet_channels"] = tuple(d["unet_channels"])
        return cls(**d)


class CompositionModel(nn.Module):
    """Bundles the patch encoder and the conditional denoiser."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = PatchEncoder(
            ref_size=config.ref_size,
            patch_size=config.patch_size,
            embed_dim=config.embed_dim,
            token_dim=config.token_dim,
            depth=config.encoder_depth,
            heads=config.encoder_heads,
        )
        self.unet = ConditionalUNet(
            channels=config.unet_channels,
            cond_dim=config.token_dim,
            time_dim=config.time_dim,
            heads=config.unet_heads,
        )

    def forward(self, stack: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        return self.unet(stack, t, cond)

    def encode_refs(self, refs: list[ReferenceImage]) -> ConditioningTokens:
        return encode_references(refs, self.encoder)

    def encode_ref_batch(self, refs: torch.Tensor) -> torch.Tensor:
        """Encode (B, K, 3, R, R) references into (B, K*(1+L), D) tokens."""
        b, k = refs.shape[:2]
        globals_, locals_ = self.encoder(refs.reshape(b * k, *refs.shape[2:]))
        blocks = torch.cat([globals_.unsqueeze(1), locals_], dim=1)  # (B*K, 1+L, D)
        return blocks.reshape(b, k * blocks.shape[1], blocks.shape[2])

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int) -> CompositionModel:
    """Construct a model with deterministic, seed-driven initialization.

    The final noise projection starts at zero so a fresh model predicts zero
    noise everywhere.
    """
    model = CompositionModel(config)
    init_parameters(model, seed, zero_final=False)
    with torch.no_grad():
        model.unet.conv_out.weight.zero_()
        model.unet.conv_out.bias.zero_()
    return model
