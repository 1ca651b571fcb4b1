"""Vision transformer with BatchNorm in place of LayerNorm.

Statistic-matching recovery needs running batch statistics, which a
stock pre-norm transformer does not track. The conversion rule is
mechanical: every LayerNorm site becomes a token-wise BatchNorm, and one
extra BatchNorm is inserted between the two linear layers of each FFN.
A depth-L model therefore carries 3L block-level BatchNorms plus the
final pre-head one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class TransformerDescription:
    """Structural description of a pre-norm encoder, prior to conversion.

    ``ffn_hidden_dims`` must contain exactly one entry: the conversion
    rule is defined for two-linear-layer FFNs only.
    """

    embed_dim: int
    depth: int
    num_heads: int
    ffn_hidden_dims: tuple[int, ...]
    patch_size: int
    input_resolution: int
    num_classes: int
    in_channels: int = 3

    def validate(self):
        if self.depth < 1:
            raise ConfigurationError("transformer depth must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.input_resolution % self.patch_size != 0:
            raise ConfigurationError(
                f"resolution {self.input_resolution} not divisible by "
                f"patch size {self.patch_size}"
            )


class TokenBatchNorm(nn.Module):
    """BatchNorm1d applied across all tokens of a (B, N, C) sequence."""

    def __init__(self, dim: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)

    def forward(self, x):
        return self.bn(x.transpose(1, 2)).transpose(1, 2)


class FeedForward(nn.Module):
    """Two-linear FFN; ``mid_norm`` slots a BatchNorm between the layers."""

    def __init__(self, dim: int, hidden_dim: int, mid_norm: bool):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.norm = TokenBatchNorm(hidden_dim) if mid_norm else nn.Identity()
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.norm(self.fc1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, dim, num_heads, hidden_dim, norm_factory, ffn_mid_norm):
        super().__init__()
        self.norm1 = norm_factory(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = norm_factory(dim)
        self.ffn = FeedForward(dim, hidden_dim, ffn_mid_norm)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.ffn(self.norm2(x))
        return x


class VisionTransformer(nn.Module):
    """Pre-norm ViT with a class token and learned position embeddings."""

    def __init__(self, desc: TransformerDescription, batch_norm: bool):
        super().__init__()
        desc.validate()
        if batch_norm:
            norm_factory = TokenBatchNorm
        else:
            norm_factory = nn.LayerNorm
        dim = desc.embed_dim
        hidden_dim = desc.ffn_hidden_dims[0]
        num_patches = (desc.input_resolution // desc.patch_size) ** 2

        self.desc = desc
        self.patch_embed = nn.Conv2d(
            desc.in_channels, dim, kernel_size=desc.patch_size, stride=desc.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.empty(1, num_patches + 1, dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, desc.num_heads, hidden_dim, norm_factory, batch_norm)
            for _ in range(desc.depth)
        )
        self.norm = norm_factory(dim)
        self.head = nn.Linear(dim, desc.num_classes)

    def features(self, x):
        x = self.patch_embed(x)
        x = x.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0]

    def forward(self, x):
        return self.head(self.features(x))


def tiny_description(input_resolution: int, num_classes: int) -> TransformerDescription:
    """Tiny variant: width 192, depth 12, 3 heads, 4x FFN expansion.

    Patch size scales with resolution so the token grid stays modest.
    """
    patch = {32: 4, 64: 8, 224: 16}.get(input_resolution)
    if patch is None:
        raise ConfigurationError(
            f"no patch size defined for resolution {input_resolution}"
        )
    return TransformerDescription(
        embed_dim=192,
        depth=12,
        num_heads=3,
        ffn_hidden_dims=(768,),
        patch_size=patch,
        input_resolution=input_resolution,
        num_classes=num_classes,
    )


def convert_ln_to_bn(desc: TransformerDescription) -> VisionTransformer:
    """Build the BatchNorm form of a pre-norm transformer description.

    Each block contributes three BatchNorms (both pre-norm sites plus the
    inserted mid-FFN one); the final pre-head norm becomes the last entry.
    Descriptions whose FFN is not a two-linear stack are rejected.
    """
    desc.validate()
    if len(desc.ffn_hidden_dims) != 1:
        raise ConfigurationError(
            "conversion is defined for two-linear FFNs only; got "
            f"{len(desc.ffn_hidden_dims) + 1} linear layers"
        )
    return VisionTransformer(desc, batch_norm=True)
