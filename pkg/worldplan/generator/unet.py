"""Video U-Net denoiser with temporal attention and per-view cross-attention."""

import math
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from worldplan.vision.encoder import group_norm


class SinusoidalPosEmb(nn.Module):
    """Sinusoidal timestep embedding."""

    def __init__(self, dim: int):
        """Initialize the embedding."""
        super().__init__()
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        """Embed integer timesteps (n,) as (n, dim)."""
        half = self.dim // 2
        scale = math.log(10000) / max(half - 1, 1)
        freqs = torch.exp(torch.arange(half, device=x.device) * -scale)
        angles = x.float()[:, None] * freqs[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=-1)


class ResnetBlock(nn.Module):
    """Two spatial convolutions; the embedding shifts the first block's output."""

    def __init__(self, dim: int, dim_out: int, emb_dim: int):
        """Initialize the block."""
        super().__init__()
        self.norm1 = group_norm(dim)
        self.conv1 = nn.Conv3d(dim, dim_out, (1, 3, 3), padding=(0, 1, 1))
        self.emb = nn.Linear(emb_dim, dim_out)
        self.norm2 = group_norm(dim_out)
        self.conv2 = nn.Conv3d(dim_out, dim_out, (1, 3, 3), padding=(0, 1, 1))
        self.skip = nn.Conv3d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        """Apply the block, shifted by the timestep embedding."""
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head attention; keys come from `context` when it is given."""

    def __init__(self, dim: int, context_dim: Optional[int] = None, heads: int = 4):
        """Initialize the attention."""
        super().__init__()
        self.heads = heads
        context_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        """Attend from `x` to `context` (self-attention without it)."""
        context = x if context is None else context
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        q, k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v)
        )
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class TemporalAttention(nn.Module):
    """Self-attention along the frame axis at every pixel."""

    def __init__(self, dim: int, frames: int, heads: int = 4):
        """Initialize the attention."""
        super().__init__()
        self.norm = group_norm(dim)
        self.frame_embed = nn.Parameter(torch.zeros(frames, dim))
        self.attn = Attention(dim, heads=heads)

    def forward(self, x: Tensor) -> Tensor:
        """Attend over time at every pixel."""
        n, _, t, h, w = x.shape
        tokens = rearrange(self.norm(x), "n c t h w -> (n h w) t c")
        tokens = tokens + self.frame_embed[:t]
        out = rearrange(self.attn(tokens), "(n h w) t c -> n c t h w", n=n, h=h, w=w)
        return x + out


class SpatialAttention(nn.Module):
    """Self-attention over the pixels of each frame."""

    def __init__(self, dim: int, heads: int = 4):
        """Initialize the attention."""
        super().__init__()
        self.norm = group_norm(dim)
        self.attn = Attention(dim, heads=heads)

    def forward(self, x: Tensor) -> Tensor:
        """Attend over the cells of each frame."""
        n, _, t, h, w = x.shape
        tokens = rearrange(self.norm(x), "n c t h w -> (n t) (h w) c")
        out = rearrange(self.attn(tokens), "(n t) (h w) c -> n c t h w", n=n, h=h, w=w)
        return x + out


class PerViewCrossAttention(nn.Module):
    """One cross-attention module per camera; view k reads only sequence k."""

    def __init__(self, dim: int, cond_dim: int, views: int, heads: int = 4):
        """Initialize one attention per view."""
        super().__init__()
        self.views = views
        self.norm = group_norm(dim)
        self.attn = nn.ModuleList(
            [Attention(dim, context_dim=cond_dim, heads=heads) for _ in range(views)]
        )

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        """Apply to x of shape ((b v), c, t, h, w) with cond of shape (b, v, L, d)."""
        _, _, t, h, w = x.shape
        tokens = rearrange(self.norm(x), "(b v) c t h w -> b v (t h w) c", v=self.views)
        out = torch.stack(
            [self.attn[k](tokens[:, k], cond[:, k]) for k in range(self.views)], dim=1
        )
        out = rearrange(out, "b v (t h w) c -> (b v) c t h w", t=t, h=h, w=w)
        return x + out


class VideoUNet(nn.Module):
    """Predicts the noise of a clip from the noisy clip and the last observed frame.

    Input channels are the noisy frame plus the conditioning frame repeated
    over time. All views share the weights and are told apart by a view
    embedding added to the timestep embedding. Below full resolution each
    level carries one cross-attention module per view.
    """

    def __init__(
        self,
        channels: Sequence[int] = (64, 128, 128),
        cond_dim: int = 128,
        frames: int = 8,
        views: int = 3,
        heads: int = 4,
    ):
        """Initialize the network."""
        super().__init__()
        self.channels = list(channels)
        self.views = views
        base = self.channels[0]
        emb_dim = 4 * base
        self.time_pos = SinusoidalPosEmb(base)
        self.time_mlp = nn.Sequential(
            nn.Linear(base, emb_dim), nn.GELU(), nn.Linear(emb_dim, emb_dim)
        )
        self.view_embed = nn.Embedding(views, emb_dim)
        self.init_conv = nn.Conv3d(6, base, (1, 3, 3), padding=(0, 1, 1))

        levels = len(self.channels)
        self.downs = nn.ModuleList()
        previous = base
        for i, dim in enumerate(self.channels):
            self.downs.append(
                nn.ModuleList(
                    [
                        ResnetBlock(previous, dim, emb_dim),
                        TemporalAttention(dim, frames, heads),
                        self._cross_block(dim, cond_dim, views, heads, i > 0),
                        nn.Conv3d(dim, dim, (1, 4, 4), (1, 2, 2), (0, 1, 1))
                        if i < levels - 1
                        else nn.Identity(),
                    ]
                )
            )
            previous = dim

        mid = self.channels[-1]
        self.mid_block1 = ResnetBlock(mid, mid, emb_dim)
        self.mid_spatial = SpatialAttention(mid, heads)
        self.mid_temporal = TemporalAttention(mid, frames, heads)
        self.mid_cross = PerViewCrossAttention(mid, cond_dim, views, heads)
        self.mid_block2 = ResnetBlock(mid, mid, emb_dim)

        self.ups = nn.ModuleList()
        for i in reversed(range(levels)):
            dim = self.channels[i]
            self.ups.append(
                nn.ModuleList(
                    [
                        ResnetBlock(previous + dim, dim, emb_dim),
                        TemporalAttention(dim, frames, heads),
                        self._cross_block(dim, cond_dim, views, heads, i > 0),
                        nn.ConvTranspose3d(dim, dim, (1, 4, 4), (1, 2, 2), (0, 1, 1))
                        if i > 0
                        else nn.Identity(),
                    ]
                )
            )
            previous = dim
        self.final_norm = group_norm(base)
        self.final_conv = nn.Conv3d(base, 3, (1, 3, 3), padding=(0, 1, 1))

    def cross_attention_modules(self, view: int) -> List[nn.Module]:
        """Return every cross-attention module that reads view `view`'s conditioning."""
        modules = [self.mid_cross.attn[view]]
        for level in list(self.downs) + list(self.ups):
            if isinstance(level[2], PerViewCrossAttention):
                modules.append(level[2].attn[view])
        return modules

    @staticmethod
    def _cross_block(
        dim: int, cond_dim: int, views: int, heads: int, enabled: bool
    ) -> nn.Module:
        if not enabled:
            return nn.Identity()
        return PerViewCrossAttention(dim, cond_dim, views, heads)

    @staticmethod
    def _cross(module: nn.Module, x: Tensor, cond: Tensor) -> Tensor:
        return module(x, cond) if isinstance(module, PerViewCrossAttention) else x

    def forward(
        self, z_t: Tensor, t: Tensor, cond: Tensor, last_frame: Tensor
    ) -> Tensor:
        """Predict noise.

        z_t: ((b v), 3, T, h, w); t: (b v,) timesteps; cond: (b, v, L, d);
        last_frame: ((b v), 3, h, w).
        """
        n = z_t.shape[0]
        views = torch.arange(self.views, device=z_t.device).repeat(n // self.views)
        emb = self.time_mlp(self.time_pos(t).to(z_t.dtype)) + self.view_embed(views)
        context = last_frame.unsqueeze(2).expand(-1, -1, z_t.shape[2], -1, -1)
        x = self.init_conv(torch.cat([z_t, context], dim=1))

        skips = []
        for block, temporal, cross, down in self.downs:
            x = temporal(block(x, emb))
            x = self._cross(cross, x, cond)
            skips.append(x)
            x = down(x)

        x = self.mid_block1(x, emb)
        x = self.mid_cross(self.mid_temporal(self.mid_spatial(x)), cond)
        x = self.mid_block2(x, emb)

        for block, temporal, cross, up in self.ups:
            x = block(torch.cat([x, skips.pop()], dim=1), emb)
            x = self._cross(cross, temporal(x), cond)
            x = up(x)
        return self.final_conv(F.silu(self.final_norm(x)))
