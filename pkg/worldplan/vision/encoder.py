"""Multi-view image encoder and BEV query decoder."""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from einops import rearrange
from torch import Tensor, nn

from worldplan.errors import ResolutionMismatchError, ViewCountError
from worldplan.microworld.render import VIEW_NAMES, MultiViewFrame

NUM_WAYPOINT_TOKENS = 4
NUM_LIGHT_TOKENS = 1


def group_norm(channels: int) -> nn.GroupNorm:
    """Return a GroupNorm with as many groups (up to 8) as divide `channels`."""
    return nn.GroupNorm(math.gcd(8, channels), channels)


def frames_to_tensor(
    frames: Union[MultiViewFrame, Sequence[MultiViewFrame], np.ndarray, Tensor]
) -> Tensor:
    """Stack frames into a float tensor of shape (batch, views, h, w, 3)."""
    if isinstance(frames, MultiViewFrame):
        frames = [frames]
    if isinstance(frames, (list, tuple)):
        frames = np.stack([frame.images for frame in frames])
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    if frames.ndim == 4:
        frames = frames.unsqueeze(0)
    return frames


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a strided projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        """Initialize the block."""
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = group_norm(out_channels)
        self.act = nn.SiLU()
        if stride != 1 or in_channels != out_channels:
            self.shortcut: nn.Module = nn.Conv2d(
                in_channels, out_channels, 1, stride=stride
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        """Apply the block."""
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.shortcut(x))


class Backbone(nn.Module):
    """Four residual blocks, overall stride 8."""

    def __init__(self, d_model: int = 128, widths: Sequence[int] = (32, 64, 96)):
        """Initialize the backbone."""
        super().__init__()
        channels = [3, *widths, d_model]
        strides = (2, 2, 2, 1)
        self.blocks = nn.Sequential(
            *[
                ResidualBlock(channels[i], channels[i + 1], strides[i])
                for i in range(len(strides))
            ]
        )
        self.stride = 8

    def forward(self, x: Tensor) -> Tensor:
        """Return the stride-8 feature map."""
        return self.blocks(x)


@dataclass
class VisionTokenSet:
    """Per-frame perception tokens: H*W BEV, 4 waypoint and 1 traffic-light."""

    bev: Tensor
    waypoint: Tensor
    light: Tensor

    @property
    def tokens(self) -> Tensor:
        """Return all tokens concatenated, shape (batch, H*W + 5, d)."""
        return torch.cat([self.bev, self.waypoint, self.light], dim=1)

    def __len__(self) -> int:
        """Return the number of tokens per frame."""
        return int(self.bev.shape[1] + self.waypoint.shape[1] + self.light.shape[1])


class VisionEncoder(nn.Module):
    """Encodes three camera views and decodes them through learned BEV queries.

    Each view goes through a shared residual backbone; its cells are flattened,
    tagged with a spatial embedding and a view embedding, and the three token
    sets are fused by a transformer encoder. A transformer decoder then lets
    H*W BEV positional queries, four waypoint queries and one light query
    attend to the fused tokens.
    """

    def __init__(
        self,
        image_size: int = 64,
        d_model: int = 128,
        bev_size: int = 20,
        layers: int = 2,
        heads: int = 4,
        num_views: int = len(VIEW_NAMES),
    ):
        """Initialize the encoder."""
        super().__init__()
        self.image_size = image_size
        self.d_model = d_model
        self.bev_size = bev_size
        self.num_views = num_views
        self.backbone = Backbone(d_model)
        if image_size % self.backbone.stride:
            raise ResolutionMismatchError(
                f"Image size {image_size} is not a multiple of the backbone stride 8"
            )
        self.feature_size = image_size // self.backbone.stride
        cells = self.feature_size**2

        self.spatial_embed = nn.Parameter(torch.randn(1, cells, d_model) * 0.02)
        self.view_embed = nn.Parameter(torch.randn(num_views, d_model) * 0.02)
        self.fusion = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(
                d_model,
                heads,
                4 * d_model,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            ),
            layers,
        )
        self.bev_queries = nn.Parameter(
            torch.randn(bev_size * bev_size, d_model) * 0.02
        )
        self.waypoint_queries = nn.Parameter(
            torch.randn(NUM_WAYPOINT_TOKENS, d_model) * 0.02
        )
        self.light_queries = nn.Parameter(torch.randn(NUM_LIGHT_TOKENS, d_model) * 0.02)
        self.decoder = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(
                d_model,
                heads,
                4 * d_model,
                dropout=0.0,
                batch_first=True,
                norm_first=True,
            ),
            layers,
        )

    @classmethod
    def from_config(cls, config: dict) -> "VisionEncoder":
        """Build the encoder from the full run config."""
        section = config["encoder"]
        return cls(
            image_size=config["microworld"]["image_size"],
            d_model=section["d_model"],
            bev_size=section["bev_size"],
            layers=section["layers"],
            heads=section["heads"],
        )

    @property
    def num_tokens(self) -> int:
        """Return the VisionTokenSet length."""
        return self.bev_size**2 + NUM_WAYPOINT_TOKENS + NUM_LIGHT_TOKENS

    def _check(self, images: Tensor) -> None:
        if images.ndim != 5:
            raise ResolutionMismatchError(
                "Expected images of shape (batch, views, h, w, 3), "
                f"got {tuple(images.shape)}"
            )
        if images.shape[1] != self.num_views:
            raise ViewCountError(
                f"Expected {self.num_views} views, got {images.shape[1]}"
            )
        if tuple(images.shape[2:]) != (self.image_size, self.image_size, 3):
            raise ResolutionMismatchError(
                f"Expected {self.image_size}x{self.image_size}x3 rasters, "
                f"got {tuple(images.shape[2:])}"
            )

    def encode_views(
        self, frames, view_order: Optional[Sequence[int]] = None
    ) -> Tensor:
        """Return fused tokens of shape (batch, views * cells, d).

        `view_order` names the view-embedding row used for each input view; it
        defaults to the camera order.
        """
        images = frames_to_tensor(frames).to(self.view_embed)
        self._check(images)
        batch = images.shape[0]
        features = self.backbone(rearrange(images, "b v h w c -> (b v) c h w"))
        tokens = rearrange(features, "(b v) d y x -> b v (y x) d", b=batch)
        order = list(range(self.num_views))
        if view_order is not None:
            order = list(view_order)
        tokens = tokens + self.spatial_embed.unsqueeze(0)
        tokens = tokens + self.view_embed[order].view(1, self.num_views, 1, -1)
        return self.fusion(rearrange(tokens, "b v n d -> b (v n) d"))

    def decode_bev(self, fused: Tensor) -> VisionTokenSet:
        """Let the BEV, waypoint and light queries attend to the fused tokens."""
        batch = fused.shape[0]
        queries = torch.cat(
            [self.bev_queries, self.waypoint_queries, self.light_queries]
        )
        out = self.decoder(queries.unsqueeze(0).expand(batch, -1, -1), fused)
        cells = self.bev_size**2
        return VisionTokenSet(
            bev=out[:, :cells],
            waypoint=out[:, cells : cells + NUM_WAYPOINT_TOKENS],
            light=out[:, cells + NUM_WAYPOINT_TOKENS :],
        )

    def forward(self, frames) -> VisionTokenSet:
        """Encode and decode a multi-view frame into its token set."""
        return self.decode_bev(self.encode_views(frames))
