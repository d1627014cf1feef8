"""Causal transformer over instruction, frame history, action and world queries."""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from worldplan.errors import ContextOverflowError
from worldplan.lm.tokenizer import PAD

ACTION_MODES = ("queries", "autoregressive")
ACTION_DIM = 3


@dataclass
class SequenceContext:
    """Episode-local LM input: instruction, frame ring buffer, previous action.

    `frames` has shape (batch, T, queries, d_lm) with T <= `t_max`, oldest first.
    """

    instruction: Tensor
    frames: Tensor
    t_max: int
    previous_action: Optional[Tensor] = None

    @classmethod
    def empty(
        cls, instruction: Tensor, t_max: int, frame_queries: int, d_lm: int
    ) -> "SequenceContext":
        """Return a context with no frames yet."""
        frames = torch.zeros(instruction.shape[0], 0, frame_queries, d_lm)
        return cls(instruction=instruction, frames=frames, t_max=t_max)

    @classmethod
    def start(
        cls, instruction: Tensor, feature: Tensor, t_max: int
    ) -> "SequenceContext":
        """Return the context of an episode's first step.

        The first FrameFeature fills all `t_max` slots and the current action is
        the zero command, which is how training samples near an episode start
        are laid out.
        """
        frames = feature.unsqueeze(1).expand(-1, t_max, -1, -1).clone()
        action = feature.new_zeros(feature.shape[0], ACTION_DIM)
        return cls(
            instruction=instruction, frames=frames, t_max=t_max, previous_action=action
        )

    def advance(
        self, instruction: Tensor, feature: Tensor, action: Optional[Tensor]
    ) -> "SequenceContext":
        """Push the newest frame and set the instruction and the current action.

        A missing action keeps the one already held.
        """
        ctx = self.with_instruction(instruction).push(feature)
        return ctx if action is None else ctx.with_action(action)

    def push(self, feature: Tensor) -> "SequenceContext":
        """Append a FrameFeature (batch, queries, d_lm); the oldest goes past t_max."""
        frames = torch.cat([self.frames.to(feature), feature.unsqueeze(1)], dim=1)
        return replace(self, frames=frames[:, -self.t_max :])

    def with_instruction(self, instruction: Tensor) -> "SequenceContext":
        """Return the context with a new instruction and the same history."""
        return replace(self, instruction=instruction)

    def with_action(self, action: Optional[Tensor]) -> "SequenceContext":
        """Return the context with `action` (batch, 3) as the current action."""
        return replace(self, previous_action=action)

    def __len__(self) -> int:
        """Return the number of buffered frames."""
        return int(self.frames.shape[1])


@dataclass
class PlanOutput:
    """Waypoints (batch, 4, 2) in the ego frame plus the completion probability."""

    waypoints: Tensor
    completed: Tensor
    completion_logit: Tensor

    def waypoints_array(self, index: int = 0) -> np.ndarray:
        """Return one sample's waypoints as a float64 array."""
        return self.waypoints[index].detach().cpu().double().numpy()

    def is_completed(self, threshold: float = 0.5, index: int = 0) -> bool:
        """Return whether the completion probability reaches `threshold`."""
        return bool(self.completed[index].item() >= threshold)


class CausalSelfAttention(nn.Module):
    """Multi-head self-attention with an explicit mask."""

    def __init__(self, d_model: int, heads: int):
        """Initialize the projections."""
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
        self.heads = heads
        self.c_attn = nn.Linear(d_model, 3 * d_model)
        self.c_proj = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        """Attend over `x` (batch, length, d_model) under `mask`."""
        batch, length, dim = x.shape
        q, k, v = self.c_attn(x).split(dim, dim=2)
        q, k, v = (
            t.view(batch, length, self.heads, dim // self.heads).transpose(1, 2)
            for t in (q, k, v)
        )
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.c_proj(y.transpose(1, 2).contiguous().view(batch, length, dim))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, heads: int):
        """Initialize the block."""
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, heads)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        """Apply attention and MLP with pre-norm residuals."""
        x = x + self.attn(self.ln_1(x), mask)
        return x + self.mlp(self.ln_2(x))


class LanguageCore(nn.Module):
    """A small GPT-style decoder standing in for the pretrained language model.

    The sequence is: instruction tokens (left-padded), buffered frame features
    oldest to newest each tagged by its age, the current action, the action
    slots, then the world queries. With `action_mode="queries"` the action slots
    are learned queries; with `"autoregressive"` they are a start token followed
    by the embeddings of the first three waypoints.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 256,
        layers: int = 4,
        heads: int = 4,
        t_max: int = 8,
        frame_queries: int = 8,
        action_queries: int = 4,
        world_queries: int = 64,
        max_context: int = 192,
        action_mode: str = "queries",
    ):
        """Initialize the model."""
        super().__init__()
        if action_mode not in ACTION_MODES:
            raise ValueError(
                f"Unknown action mode '{action_mode}', expected {ACTION_MODES}"
            )
        self.d_model = d_model
        self.t_max = t_max
        self.frame_queries = frame_queries
        self.num_action = action_queries
        self.num_world = world_queries
        self.max_context = max_context
        self.action_mode = action_mode

        self.token_embed = nn.Embedding(vocab_size, d_model)
        self.pos_embed = nn.Parameter(torch.randn(max_context, d_model) * 0.02)
        self.age_embed = nn.Embedding(t_max, d_model)
        self.action_embed = nn.Linear(ACTION_DIM, d_model)
        if action_mode == "queries":
            init = torch.randn(action_queries, d_model) * 0.02
            self.action_queries = nn.Parameter(init)
        else:
            self.start_token = nn.Parameter(torch.randn(1, d_model) * 0.02)
            self.waypoint_embed = nn.Linear(2, d_model)
        self.world_queries = nn.Parameter(torch.randn(world_queries, d_model) * 0.02)
        self.blocks = nn.ModuleList([Block(d_model, heads) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(d_model)

        self.apply(self._init_weights)

    @classmethod
    def from_config(cls, config: dict, vocab_size: int) -> "LanguageCore":
        """Build the model from the `lm` config section."""
        section = config["lm"]
        return cls(
            vocab_size=vocab_size,
            d_model=section["d_model"],
            layers=section["layers"],
            heads=section["heads"],
            t_max=section["t_max"],
            frame_queries=section["qformer_queries"],
            action_queries=section["action_queries"],
            world_queries=section["world_queries"],
            max_context=section["max_context"],
            action_mode=section["action_mode"],
        )

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def sequence_length(
        self, instruction_length: int, frames: int, with_action: bool
    ) -> int:
        """Return the assembled sequence length."""
        return (
            instruction_length
            + frames * self.frame_queries
            + int(with_action)
            + self.num_action
            + self.num_world
        )

    def _action_slots(self, batch: int, waypoints_in: Optional[Tensor]) -> Tensor:
        if self.action_mode == "queries":
            return self.action_queries.unsqueeze(0).expand(batch, -1, -1)
        if waypoints_in is None:
            waypoints_in = torch.zeros(batch, self.num_action - 1, 2)
        fed_back = waypoints_in[:, : self.num_action - 1].to(self.pos_embed)
        previous = self.waypoint_embed(fed_back)
        start = self.start_token.unsqueeze(0).expand(batch, -1, -1)
        return torch.cat([start, previous], dim=1)

    def forward_lm(
        self, ctx: SequenceContext, waypoints_in: Optional[Tensor] = None
    ) -> Tuple[Tensor, Tensor]:
        """Return (action features (batch, N_a, d), world features (batch, Q_w, d)).

        `waypoints_in` feeds previously predicted (or ground-truth) waypoints to
        the action slots in autoregressive mode and is ignored otherwise.
        """
        instruction = ctx.instruction.to(self.pos_embed.device)
        batch, length = instruction.shape
        frames = ctx.frames[:, -self.t_max :].to(self.pos_embed)
        count = frames.shape[1]
        with_action = ctx.previous_action is not None
        total = self.sequence_length(length, count, with_action)
        if total > self.max_context:
            raise ContextOverflowError(
                f"Sequence of {total} tokens exceeds the context budget "
                f"of {self.max_context}"
            )

        parts = [self.token_embed(instruction)]
        if count:
            ages = torch.arange(count - 1, -1, -1, device=frames.device)
            aged = frames + self.age_embed(ages).view(1, count, 1, -1)
            parts.append(aged.reshape(batch, count * self.frame_queries, -1))
        if with_action:
            action = ctx.previous_action.to(self.pos_embed)  # type: ignore[union-attr]
            parts.append(self.action_embed(action).unsqueeze(1))
        parts.append(self._action_slots(batch, waypoints_in))
        parts.append(self.world_queries.unsqueeze(0).expand(batch, -1, -1))
        x = torch.cat(parts, dim=1) + self.pos_embed[:total]

        causal = torch.ones(total, total, dtype=torch.bool, device=x.device).tril()
        keys = torch.ones(batch, total, dtype=torch.bool, device=x.device)
        keys[:, :length] = instruction != PAD
        mask = causal.unsqueeze(0) & keys.unsqueeze(1)
        mask = mask | torch.eye(total, dtype=torch.bool, device=x.device).unsqueeze(0)
        mask = mask.unsqueeze(1)

        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        start = total - self.num_action - self.num_world
        return x[:, start : start + self.num_action], x[:, start + self.num_action :]

    def forward(self, ctx: SequenceContext, waypoints_in: Optional[Tensor] = None):
        """Alias of `forward_lm`."""
        return self.forward_lm(ctx, waypoints_in)


class ActionHead(nn.Module):
    """Per-query two-layer waypoint MLP and a pooled completion classifier."""

    def __init__(self, d_model: int = 256, hidden: Optional[int] = None):
        """Initialize the head."""
        super().__init__()
        hidden = hidden or d_model
        self.waypoint = nn.Sequential(
            nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, 2)
        )
        self.completion = nn.Sequential(
            nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, 1)
        )

    def predict_actions(self, action_features: Tensor) -> PlanOutput:
        """Decode one waypoint per action feature and the completion probability."""
        logit = self.completion(action_features.mean(dim=1)).squeeze(-1)
        return PlanOutput(
            waypoints=self.waypoint(action_features),
            completed=torch.sigmoid(logit),
            completion_logit=logit,
        )

    def forward(self, action_features: Tensor) -> PlanOutput:
        """Decode action features into a plan."""
        return self.predict_actions(action_features)
