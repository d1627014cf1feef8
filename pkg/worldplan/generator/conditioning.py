"""Generator conditioning: last-frame appearance fused with world embeddings."""

from dataclasses import dataclass

import torch
from einops import rearrange
from torch import Tensor, nn

from worldplan.errors import ViewCountError
from worldplan.generator.unet import Attention
from worldplan.vision.encoder import group_norm


@dataclass
class MultiViewWorldEmbedding:
    """Per-view conditioning sequences, shape (batch, views, L, d)."""

    views: Tensor

    def __len__(self) -> int:
        """Return the number of per-view sequences."""
        return int(self.views.shape[1])

    def sequence(self, view: int) -> Tensor:
        """Return one view's conditioning sequence (batch, L, d)."""
        return self.views[:, view]


class AppearanceEncoder(nn.Module):
    """Three strided conv blocks turning each last frame into a feature grid."""

    def __init__(self, cond_dim: int = 128, widths=(32, 64)):
        """Initialize the encoder."""
        super().__init__()
        channels = [3, *widths, cond_dim]
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                group_norm(c_out),
                nn.SiLU(),
            ]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, last_frame: Tensor) -> Tensor:
        """Map (batch, views, h, w, 3) in [0, 1] to (batch, views, cells, cond_dim)."""
        batch = last_frame.shape[0]
        x = rearrange(last_frame * 2.0 - 1.0, "b v h w c -> (b v) c h w")
        features = self.blocks(x)
        return rearrange(features, "(b v) d y x -> b v (y x) d", b=batch)


class MultiViewFusion(nn.Module):
    """Cross-view self-attention, then cross-attention to the LM world vectors.

    `multiview_fusion=False` bypasses the cross-view self-attention. The
    cross-attention output projection has no bias, so a zero value projection
    removes the world-vector contribution exactly.
    """

    def __init__(
        self,
        cond_dim: int = 128,
        world_dim: int = 256,
        views: int = 3,
        heads: int = 4,
        multiview_fusion: bool = True,
    ):
        """Initialize the fusion block."""
        super().__init__()
        self.views = views
        self.multiview_fusion = multiview_fusion
        self.view_embed = nn.Parameter(torch.randn(views, cond_dim) * 0.02)
        self.norm_self = nn.LayerNorm(cond_dim)
        self.self_attn = Attention(cond_dim, heads=heads)
        self.norm_cross = nn.LayerNorm(cond_dim)
        self.cross_attn = Attention(cond_dim, context_dim=world_dim, heads=heads)
        self.norm_ff = nn.LayerNorm(cond_dim)
        self.ff = nn.Sequential(
            nn.Linear(cond_dim, 4 * cond_dim),
            nn.GELU(),
            nn.Linear(4 * cond_dim, cond_dim),
        )

    def fuse_multiview(
        self, appearance: Tensor, world: Tensor
    ) -> MultiViewWorldEmbedding:
        """Fuse appearance (batch, views, L, d) with world vectors (batch, Q_w, d)."""
        if appearance.shape[1] != self.views:
            raise ViewCountError(
                f"Expected {self.views} appearance grids, got {appearance.shape[1]}"
            )
        cells = appearance.shape[2]
        x = appearance + self.view_embed.view(1, self.views, 1, -1)
        x = rearrange(x, "b v n d -> b (v n) d")
        if self.multiview_fusion:
            x = x + self.self_attn(self.norm_self(x))
        if world.shape[1] > 0:
            x = x + self.cross_attn(self.norm_cross(x), world.to(x))
        x = x + self.ff(self.norm_ff(x))
        return MultiViewWorldEmbedding(rearrange(x, "b (v n) d -> b v n d", n=cells))

    def forward(self, appearance: Tensor, world: Tensor) -> MultiViewWorldEmbedding:
        """Alias of `fuse_multiview`."""
        return self.fuse_multiview(appearance, world)
