"""Visual backbone: patch-embedding transformer producing [CLS] + patch states.

Images are single-channel float grids in [0, 1]. They are cut into
non-overlapping square patches, linearly projected to the hidden width, and
run through a small pre-norm transformer with a learned class token and
learned positional embeddings. Anything honoring the returned
:class:`VisualSequence` layout (class vector at index 0, N patch vectors
after) can stand in as an encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import ModelConfig


class ShapeError(ValueError):
    """Input tensor shape incompatible with the configured geometry."""


@dataclass
class VisualSequence:
    """Encoded image: ``full`` is (B, N+1, h) with the class vector first."""

    full: Tensor

    @property
    def cls(self) -> Tensor:
        return self.full[:, 0, :]

    @property
    def patches(self) -> Tensor:
        return self.full[:, 1:, :]

    @property
    def n_patches(self) -> int:
        return self.full.shape[1] - 1


class FeedForward(nn.Module):
    def __init__(self, hidden_size: int, ffn_ratio: int, dropout: float):
        super().__init__()
        inner = hidden_size * ffn_ratio
        self.net = nn.Sequential(
            nn.Linear(hidden_size, inner),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(inner, hidden_size),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block, shared by the visual and text encoders."""

    def __init__(self, hidden_size: int, num_heads: int, ffn_ratio: int, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(hidden_size)
        self.attn = nn.MultiheadAttention(
            hidden_size, num_heads, dropout=dropout, batch_first=True
        )
        self.drop = nn.Dropout(dropout)
        self.norm_ffn = nn.LayerNorm(hidden_size)
        self.ffn = FeedForward(hidden_size, ffn_ratio, dropout)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        normed = self.norm_attn(x)
        attended, _ = self.attn(
            normed,
            normed,
            normed,
            key_padding_mask=key_padding_mask,
            need_weights=False,
        )
        x = x + self.drop(attended)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class VisualEncoder(nn.Module):
    """Patch transformer over a fixed image geometry.

    forward(images) takes (B, H, W) or (H, W) floats and returns a
    :class:`VisualSequence` of length N+1.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.image_height = cfg.image_height
        self.image_width = cfg.image_width
        self.patch_size = cfg.patch_size
        self.n_patches = cfg.patch_count
        self.hidden_size = cfg.hidden_size
        self.patch_proj = nn.Linear(cfg.patch_size * cfg.patch_size, cfg.hidden_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.hidden_size))
        self.pos_embedding = nn.Parameter(
            torch.zeros(1, self.n_patches + 1, cfg.hidden_size)
        )
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden_size, cfg.num_heads, cfg.ffn_ratio, cfg.dropout)
            for _ in range(cfg.visual_layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_size)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)

    def patchify(self, images: Tensor) -> Tensor:
        if images.dim() == 2:
            images = images.unsqueeze(0)
        if images.dim() != 3:
            raise ShapeError(
                f"expected images of shape (B, H, W) or (H, W), got "
                f"{tuple(images.shape)}"
            )
        b, h, w = images.shape
        if h != self.image_height or w != self.image_width:
            raise ShapeError(
                f"image size {h}x{w} does not match configured "
                f"{self.image_height}x{self.image_width}"
            )
        p = self.patch_size
        patches = images.reshape(b, h // p, p, w // p, p)
        patches = patches.permute(0, 1, 3, 2, 4).reshape(b, self.n_patches, p * p)
        return patches

    def forward(self, images: Tensor) -> VisualSequence:
        patches = self.patchify(images)
        x = self.patch_proj(patches)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embedding
        x = self.drop(x)
        for block in self.blocks:
            x = block(x)
        return VisualSequence(full=self.norm(x))


__all__ = ["EncoderBlock", "FeedForward", "ShapeError", "VisualEncoder", "VisualSequence"]
