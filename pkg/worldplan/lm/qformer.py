"""Q-Former: compress a frame's vision tokens into a few learned-query vectors."""

import torch
from torch import Tensor, nn

from worldplan.vision.encoder import VisionTokenSet


class QFormerBlock(nn.Module):
    """Query self-attention, cross-attention to vision tokens, MLP (post-norm)."""

    def __init__(self, dim: int, heads: int):
        """Initialize the block."""
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln1 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )
        self.ln3 = nn.LayerNorm(dim)

    def forward(self, queries: Tensor, features: Tensor) -> Tensor:
        """Update the queries from themselves and the frame features."""
        attended, _ = self.self_attn(queries, queries, queries, need_weights=False)
        queries = self.ln1(queries + attended)
        attended, _ = self.cross_attn(queries, features, features, need_weights=False)
        queries = self.ln2(queries + attended)
        return self.ln3(queries + self.mlp(queries))


class QFormer(nn.Module):
    """Learned queries plus a two-layer adapter into the language-model width."""

    def __init__(
        self,
        vision_dim: int = 128,
        lm_dim: int = 256,
        num_queries: int = 8,
        heads: int = 4,
        layers: int = 2,
    ):
        """Initialize the Q-Former."""
        super().__init__()
        self.num_queries = num_queries
        self.query_tokens = nn.Parameter(torch.randn(1, num_queries, vision_dim) * 0.02)
        self.layers = nn.ModuleList(
            [QFormerBlock(vision_dim, heads) for _ in range(layers)]
        )
        self.adapter = nn.Sequential(
            nn.Linear(vision_dim, lm_dim), nn.GELU(), nn.Linear(lm_dim, lm_dim)
        )

    def compress_frame(self, tokens) -> Tensor:
        """Return the FrameFeature of shape (batch, num_queries, lm_dim)."""
        features = tokens.tokens if isinstance(tokens, VisionTokenSet) else tokens
        queries = self.query_tokens.expand(features.shape[0], -1, -1)
        for layer in self.layers:
            queries = layer(queries, features)
        return self.adapter(queries)

    def forward(self, tokens) -> Tensor:
        """Alias of `compress_frame`."""
        return self.compress_frame(tokens)
