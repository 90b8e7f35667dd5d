"""Reference-image conditioning tokens.

Each square reference canvas is patchified, embedded, passed through a small
self-attention backbone, and projected by a single linear adaptor into one
global token (mean-pooled) plus one local token per patch. Token sets from
multiple references are concatenated in list order with no cross-reference
positional encoding, so reference order never matters downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .dataprep import ReferenceImage


@dataclass
class ReferenceTokens:
    """Tokens for one reference: 1 global vector plus L local vectors."""

    global_token: torch.Tensor  # (D,)
    local_tokens: torch.Tensor  # (L, D)
    source_ref_index: int = 0

    def __post_init__(self) -> None:
        if self.global_token.ndim != 1 or self.local_tokens.ndim != 2:
            raise ValueError("global token must be 1-D and locals 2-D")
        if self.global_token.shape[0] != self.local_tokens.shape[1]:
            raise ValueError("global and local token dims differ")
        if not bool(torch.isfinite(self.global_token).all()
                    and torch.isfinite(self.local_tokens).all()):
            raise ValueError("tokens must be finite")

    @property
    def dim(self) -> int:
        return self.global_token.shape[0]

    @property
    def num_locals(self) -> int:
        return self.local_tokens.shape[0]


@dataclass
class ConditioningTokens:
    """Concatenated token sequence over K references, length K * (1 + L)."""

    tokens: torch.Tensor  # (K * (1 + L), D)
    ref_count: int

    def __post_init__(self) -> None:
        if self.ref_count < 1:
            raise ValueError("need at least one reference")
        if self.tokens.ndim != 2 or self.tokens.shape[0] % self.ref_count != 0:
            raise ValueError("token sequence length must be K * (1 + L)")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with an MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEncoder(nn.Module):
    """Patchify -> linear embed -> self-attention blocks -> linear adaptor.

    ``forward`` takes reference canvases as (B, 3, R, R) tensors and returns
    (globals (B, D), locals (B, L, D)). Patch positions inside one reference
    get a learned embedding; references themselves carry no position.
    """

    def __init__(self, ref_size: int = 64, patch_size: int = 8,
                 embed_dim: int = 128, token_dim: int = 128,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        if ref_size % patch_size != 0:
            raise ValueError(
                f"reference resolution {ref_size} not divisible by patch size {patch_size}")
        self.ref_size = ref_size
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.num_patches = (ref_size // patch_size) ** 2
        self.embed = nn.Linear(3 * patch_size * patch_size, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches, embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(embed_dim, heads) for _ in range(depth))
        self.adaptor = nn.Linear(embed_dim, token_dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        if (h, w) != (self.ref_size, self.ref_size):
            raise ValueError(
                f"expected {self.ref_size}x{self.ref_size} references, got {h}x{w}")
        p = self.patch_size
        g = h // p
        x = images.reshape(b, c, g, p, g, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
        return x

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.embed(self.patchify(images)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        locals_ = self.adaptor(x)
        global_ = self.adaptor(x.mean(dim=1))
        return global_, locals_

    def backbone_parameters(self):
        """Everything except the adaptor projection (for freeze scopes)."""
        adaptor_ids = {id(p) for p in self.adaptor.parameters()}
        return [p for p in self.parameters() if id(p) not in adaptor_ids]


def reference_to_tensor(ref: ReferenceImage | np.ndarray,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    pixels = ref.pixels if isinstance(ref, ReferenceImage) else np.asarray(ref)
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).to(dtype)


def encode_reference(ref: ReferenceImage | np.ndarray, encoder: PatchEncoder,
                     source_ref_index: int = 0) -> ReferenceTokens:
    """Encode one reference canvas into its token set."""
    dtype = next(encoder.parameters()).dtype
    batch = reference_to_tensor(ref, dtype).unsqueeze(0)
    global_, locals_ = encoder(batch)
    return ReferenceTokens(global_token=global_[0], local_tokens=locals_[0],
                           source_ref_index=source_ref_index)


def concat_references(token_sets: list[ReferenceTokens]) -> ConditioningTokens:
    """Concatenate per-reference token blocks, globals first within each block."""
    if not token_sets:
        raise ValueError("no references to concatenate")
    dim = token_sets[0].dim
    num_locals = token_sets[0].num_locals
    for ts in token_sets[1:]:
        if ts.dim != dim or ts.num_locals != num_locals:
            raise ValueError(
                f"token sets disagree: dim {ts.dim} vs {dim}, "
                f"locals {ts.num_locals} vs {num_locals}")
    blocks = [torch.cat([ts.global_token.unsqueeze(0), ts.local_tokens], dim=0)
              for ts in token_sets]
    return ConditioningTokens(tokens=torch.cat(blocks, dim=0),
                              ref_count=len(token_sets))


def encode_references(refs: list[ReferenceImage], encoder: PatchEncoder) -> ConditioningTokens:
    """Encode and concatenate a full reference list in one batched pass."""
    if not refs:
        raise ValueError("no references to concatenate")
    dtype = next(encoder.parameters()).dtype
    batch = torch.stack([reference_to_tensor(r, dtype) for r in refs])
    globals_, locals_ = encoder(batch)
    token_sets = [
        ReferenceTokens(global_token=globals_[k], local_tokens=locals_[k],
                        source_ref_index=k)
        for k in range(len(refs))
    ]
    return concat_references(token_sets)
