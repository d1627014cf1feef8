"""The full driving agent: encoder, Q-Former, language core, action head, generator."""

import hashlib
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from worldplan.generator.world import WorldGenerator
from worldplan.lm.core import ActionHead, LanguageCore, PlanOutput, SequenceContext
from worldplan.lm.qformer import QFormer
from worldplan.lm.tokenizer import Vocabulary
from worldplan.vision.encoder import VisionEncoder
from worldplan.vision.heads import PerceptionHeads

MODULE_GROUPS = ("encoder", "heads", "lm", "generator")


def parameter_hash(module: Optional[nn.Module]) -> str:
    """Return the SHA-256 of a module's state, keys in sorted order."""
    digest = hashlib.sha256()
    if module is not None:
        for key, value in sorted(module.state_dict().items()):
            digest.update(key.encode("utf-8"))
            digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class DrivingAgent(nn.Module):
    """Everything that is trained, grouped the way the curriculum freezes it.

    Groups: `encoder` (vision encoder), `heads` (Stage-1 perception heads, absent
    afterwards), `lm` (Q-Former, language core, action head) and `generator`
    (absent when the configuration has no world queries).
    """

    def __init__(self, config: dict, vocab: Optional[Vocabulary] = None):
        """Initialize every component from the run config."""
        super().__init__()
        self.vocab = vocab or Vocabulary()
        lm_section = config["lm"]
        self.instruction_length = int(lm_section["instruction_length"])
        self.completion_threshold = float(lm_section["completion_threshold"])
        self.encoder = VisionEncoder.from_config(config)
        self.heads: Optional[PerceptionHeads] = PerceptionHeads(self.encoder.d_model)
        self.qformer = QFormer(
            vision_dim=self.encoder.d_model,
            lm_dim=lm_section["d_model"],
            num_queries=lm_section["qformer_queries"],
            heads=lm_section["heads"],
            layers=lm_section["qformer_layers"],
        )
        self.lm = LanguageCore.from_config(config, len(self.vocab))
        self.action_head = ActionHead(lm_section["d_model"])
        self.generator: Optional[WorldGenerator] = None
        if lm_section["world_queries"] > 0:
            self.generator = WorldGenerator.from_config(config)

    def group(self, name: str) -> List[nn.Module]:
        """Return the modules making up one freeze group."""
        if name == "encoder":
            return [self.encoder]
        if name == "heads":
            return [self.heads] if self.heads is not None else []
        if name == "lm":
            return [self.qformer, self.lm, self.action_head]
        if name == "generator":
            return [self.generator] if self.generator is not None else []
        raise KeyError(f"Unknown module group '{name}'")

    def group_hash(self, name: str) -> str:
        """Return the parameter hash of one group."""
        digest = hashlib.sha256()
        for module in self.group(name):
            digest.update(parameter_hash(module).encode("ascii"))
        return digest.hexdigest()

    def group_hashes(self) -> Dict[str, str]:
        """Return the hash of every group."""
        return {name: self.group_hash(name) for name in MODULE_GROUPS}

    def set_trainable(self, trainable: Sequence[str]) -> None:
        """Enable gradients for the named groups only; frozen groups go to eval mode."""
        for name in MODULE_GROUPS:
            for module in self.group(name):
                enabled = name in trainable
                module.train(enabled)
                for parameter in module.parameters():
                    parameter.requires_grad_(enabled)

    def strip_heads(self) -> None:
        """Discard the perception heads once Stage 1 is over."""
        self.heads = None

    @property
    def device(self) -> torch.device:
        """Return the device the parameters live on."""
        return self.encoder.view_embed.device

    def encode_instructions(self, texts: Sequence[str]) -> Tensor:
        """Return left-padded token ids, shape (batch, instruction_length)."""
        return torch.tensor(
            [self.vocab.encode_padded(text, self.instruction_length) for text in texts],
            dtype=torch.long,
            device=self.device,
        )

    def frame_features(self, frames: Tensor) -> Tensor:
        """Return the FrameFeature of frames (batch, views, h, w, 3)."""
        return self.qformer.compress_frame(self.encoder(frames))

    def history_context(
        self,
        history: Tensor,
        instruction: Tensor,
        previous_action: Optional[Tensor] = None,
    ) -> SequenceContext:
        """Build a context from frames (batch, T, views, h, w, 3), oldest first."""
        batch, steps = history.shape[:2]
        flat = history.reshape(batch * steps, *history.shape[2:])
        features = self.frame_features(flat).view(batch, steps, -1, self.lm.d_model)
        return SequenceContext(
            instruction=instruction,
            frames=features[:, -self.lm.t_max :],
            t_max=self.lm.t_max,
            previous_action=previous_action,
        )

    def plan(
        self, ctx: SequenceContext, waypoints_in: Optional[Tensor] = None
    ) -> Tuple[PlanOutput, Tensor]:
        """Return the plan and the world features for a context.

        In autoregressive action mode without `waypoints_in`, waypoints are
        decoded one at a time, each fed back before predicting the next.
        """
        if self.lm.action_mode == "queries" or waypoints_in is not None:
            actions, world = self.lm.forward_lm(ctx, waypoints_in)
            return self.action_head.predict_actions(actions), world
        batch = ctx.instruction.shape[0]
        fed = torch.zeros(batch, self.lm.num_action - 1, 2, device=self.device)
        for index in range(self.lm.num_action - 1):
            actions, _ = self.lm.forward_lm(ctx, fed)
            predicted = self.action_head.predict_actions(actions).waypoints
            fed = fed.clone()
            fed[:, index] = predicted[:, index].detach()
        actions, world = self.lm.forward_lm(ctx, fed)
        return self.action_head.predict_actions(actions), world
