"""The three-stage training curriculum."""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from worldplan.config import config_hash
from worldplan.errors import ConfigError, WorldPlanError
from worldplan.generator.conditioning import MultiViewWorldEmbedding
from worldplan.streams import LossReportStream
from worldplan.training.data import PerceptionDataset, collate_perception
from worldplan.training.model import MODULE_GROUPS, DrivingAgent
from worldplan.vision.heads import light_accuracy, pretrain_losses

FROZEN_GROUPS = {
    1: frozenset({"lm", "generator"}),
    2: frozenset({"encoder"}),
    3: frozenset({"encoder", "generator"}),
}


@dataclass(frozen=True)
class StageConfig:
    """Budget, optimizer settings and freeze set of one curriculum stage."""

    stage: int
    iterations: int
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    frozen: FrozenSet[str] = frozenset()
    rollout_depth: int = 1
    loss_weights: Tuple[float, float, float] = (1.0, 0.5, 1.0)
    sample_steps: Optional[int] = None
    seed: int = 0
    log_every: int = 50
    num_workers: int = 0

    def __post_init__(self) -> None:
        """Check the freeze matrix and rollout depth of the stage."""
        if self.stage not in FROZEN_GROUPS:
            raise ConfigError(f"Unknown training stage {self.stage}")
        if not FROZEN_GROUPS[self.stage] <= self.frozen:
            missing = sorted(FROZEN_GROUPS[self.stage] - self.frozen)
            raise ConfigError(f"Stage {self.stage} must freeze {missing}")
        if self.stage == 3 and self.rollout_depth not in (2, 3):
            raise ConfigError(
                f"Stage 3 rollout depth must be 2 or 3, got {self.rollout_depth}"
            )
        if self.stage != 3 and self.rollout_depth != 1:
            raise ConfigError(f"Stage {self.stage} trains single steps only")

    @property
    def trainable(self) -> Tuple[str, ...]:
        """Return the module groups the optimizer updates."""
        return tuple(name for name in MODULE_GROUPS if name not in self.frozen)

    @classmethod
    def for_stage(cls, config: dict, stage: int) -> "StageConfig":
        """Build the stage settings from the `training` config section."""
        section = config["training"]
        weights = section["loss_weights"]
        return cls(
            stage=stage,
            iterations=int(section["iterations"][f"stage{stage}"]),
            lr=float(section["lr"]),
            weight_decay=float(section["weight_decay"]),
            batch_size=int(section["batch_size"]),
            frozen=FROZEN_GROUPS[stage],
            rollout_depth=int(section["rollout_depth"]) if stage == 3 else 1,
            loss_weights=(
                float(weights["wp"]), float(weights["flag"]), float(weights["dm"])
            ),
            sample_steps=section.get("rollout_sample_steps"),
            seed=int(config["seed"]),
            log_every=int(section["log_every"]),
            num_workers=int(section["num_workers"]),
        )


@dataclass
class LossReport:
    """Loss scalars of one training iteration."""

    stage: int
    iteration: int
    total: float
    loss_wp: Optional[float] = None
    loss_flag: Optional[float] = None
    loss_dm: Optional[float] = None
    loss_det: Optional[float] = None
    loss_light: Optional[float] = None
    rollout_steps: Optional[int] = None

    def to_record(self, run_hash: Optional[str] = None) -> dict:
        """Return a `loss_reports` stream record."""
        record = {
            "stage": self.stage,
            "iteration": self.iteration,
            "total": self.total,
            "loss_wp": self.loss_wp,
            "loss_flag": self.loss_flag,
            "loss_dm": self.loss_dm,
            "loss_det": self.loss_det,
            "loss_light": self.loss_light,
            "rollout_steps": self.rollout_steps,
        }
        if run_hash is not None:
            record["config_hash"] = run_hash
        return record


@dataclass
class StageResult:
    """What a stage run produced besides the updated agent."""

    stage: int
    reports: List[LossReport] = field(default_factory=list)
    group_hashes_before: Dict[str, str] = field(default_factory=dict)
    group_hashes_after: Dict[str, str] = field(default_factory=dict)
    light_accuracy: Optional[float] = None


def _scalar(value: Optional[Tensor]) -> Optional[float]:
    return None if value is None else float(value.detach())


def _cycle(loader: DataLoader) -> Iterator:
    for _ in itertools.count():
        yield from loader


class StageRunner:
    """Optimizer loop shared by all stages.

    Gradients reach only the trainable groups of the stage; the frozen groups
    are hash-checked after the last iteration.
    """

    def __init__(
        self,
        agent: DrivingAgent,
        settings: StageConfig,
        config: dict,
        stream: Optional[LossReportStream] = None,
    ):
        """Initialize the runner and freeze the groups of the stage."""
        self.agent = agent
        self.settings = settings
        self.stream = stream
        self.run_hash = config_hash(config)
        self.logger = logging.getLogger(f"worldplan.training.stage{settings.stage}")
        torch.manual_seed(settings.seed * 10 + settings.stage)
        self.rng = torch.Generator().manual_seed(settings.seed * 10 + settings.stage)
        agent.set_trainable(settings.trainable)
        parameters = [p for p in agent.parameters() if p.requires_grad]
        if not parameters:
            raise ConfigError(f"Stage {settings.stage} has nothing to train")
        self.optimizer = torch.optim.AdamW(
            parameters, lr=settings.lr, weight_decay=settings.weight_decay
        )

    def loader(self, dataset: Dataset, collate_fn=None) -> Iterator:
        """Return an endless, seeded shuffle over `dataset`."""
        loader = DataLoader(
            dataset,
            batch_size=self.settings.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(
                self.settings.seed + self.settings.stage
            ),
            num_workers=self.settings.num_workers,
            collate_fn=collate_fn,
        )
        return _cycle(loader)

    def run(
        self,
        batches: Iterator,
        step: Callable[[object], Tuple[Tensor, LossReport]],
    ) -> StageResult:
        """Run `settings.iterations` optimizer steps and stream the losses."""
        result = StageResult(
            self.settings.stage, group_hashes_before=self.agent.group_hashes()
        )
        for iteration in range(self.settings.iterations):
            total, report = step(next(batches))
            if not torch.isfinite(total):
                raise WorldPlanError(
                    f"Stage {self.settings.stage} loss is {float(total)} "
                    f"at iteration {iteration}"
                )
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            report.iteration = iteration
            result.reports.append(report)
            if self.stream is not None:
                self.stream.write([report.to_record(self.run_hash)])
            last = iteration == self.settings.iterations - 1
            if iteration % self.settings.log_every == 0 or last:
                self.logger.info(
                    "iteration %d/%d total=%.4f",
                    iteration + 1,
                    self.settings.iterations,
                    report.total,
                )
        result.group_hashes_after = self.agent.group_hashes()
        self.check_frozen(result)
        return result

    def check_frozen(self, result: StageResult) -> None:
        """Raise if any frozen group changed during the stage."""
        for name in self.settings.frozen:
            if result.group_hashes_before[name] != result.group_hashes_after[name]:
                raise WorldPlanError(
                    f"Frozen group '{name}' changed during stage {self.settings.stage}"
                )


def planning_losses(
    agent: DrivingAgent,
    ctx,
    waypoints: Tensor,
    completed: Tensor,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (loss_wp, loss_flag, world features) for one planning step.

    In autoregressive action mode the ground-truth waypoints are fed back.
    """
    waypoints_in = None
    if agent.lm.action_mode == "autoregressive":
        waypoints_in = waypoints[:, :-1]
    plan, world = agent.plan(ctx, waypoints_in)
    loss_wp = F.l1_loss(plan.waypoints, waypoints)
    loss_flag = F.binary_cross_entropy_with_logits(plan.completion_logit, completed)
    return loss_wp, loss_flag, world


def run_stage1(
    agent: DrivingAgent,
    dataset: PerceptionDataset,
    config: dict,
    stream: Optional[LossReportStream] = None,
    held_out: Optional[PerceptionDataset] = None,
) -> StageResult:
    """Pretrain the vision encoder and perception heads on single frames."""
    if agent.heads is None:
        raise ConfigError("Stage 1 needs a fresh agent with perception heads")
    settings = StageConfig.for_stage(config, 1)
    runner = StageRunner(agent, settings, config, stream)
    encoder = config["encoder"]
    weights = encoder["loss_weights"]
    loss_weights = (
        float(weights["det"]), float(weights["wp"]), float(weights["light"])
    )

    def step(batch) -> Tuple[Tensor, LossReport]:
        frames, targets = batch
        outputs = agent.heads(agent.encoder(frames))  # type: ignore[misc]
        losses = pretrain_losses(
            outputs, targets, encoder["bev_size"], encoder["bev_range"], loss_weights
        )
        report = LossReport(
            stage=1,
            iteration=0,
            total=float(losses.total.detach()),
            loss_wp=_scalar(losses.wp),
            loss_det=_scalar(losses.det),
            loss_light=_scalar(losses.light),
        )
        return losses.total, report

    result = runner.run(runner.loader(dataset, collate_perception), step)
    if held_out is not None and len(held_out):
        accuracy = perception_light_accuracy(agent, held_out, settings.batch_size)
        result.light_accuracy = accuracy
        runner.logger.info("Held-out traffic-light accuracy %.3f", accuracy)
    agent.strip_heads()
    return result


@torch.no_grad()
def perception_light_accuracy(
    agent: DrivingAgent, dataset: PerceptionDataset, batch_size: int = 32
) -> float:
    """Return the traffic-light accuracy of the perception heads over `dataset`."""
    if agent.heads is None:
        raise ConfigError("The perception heads have already been discarded")
    agent.eval()
    correct = 0.0
    loader = DataLoader(dataset, batch_size=batch_size, collate_fn=collate_perception)
    for frames, targets in loader:
        outputs = agent.heads(agent.encoder(frames))
        correct += light_accuracy(outputs, targets) * len(targets)
    return correct / len(dataset)


def run_stage2(
    agent: DrivingAgent,
    dataset: Dataset,
    config: dict,
    stream: Optional[LossReportStream] = None,
) -> StageResult:
    """Jointly fine-tune the LM and the generator on single-step tuples."""
    settings = StageConfig.for_stage(config, 2)
    runner = StageRunner(agent, settings, config, stream)
    w_wp, w_flag, w_dm = settings.loss_weights
    generator = agent.generator

    def step(batch) -> Tuple[Tensor, LossReport]:
        ctx = agent.history_context(
            batch["history"], batch["instruction"][:, 0], batch["previous_action"][:, 0]
        )
        loss_wp, loss_flag, world = planning_losses(
            agent, ctx, batch["waypoints"][:, 0], batch["completed"][:, 0]
        )
        total = w_wp * loss_wp + w_flag * loss_flag
        loss_dm = None
        if generator is not None:
            last = batch["history"][:, -1]
            cond = generator.condition(last, world)
            clip = batch["clip"][:, 0]
            loss_dm = generator.diffusion_loss(clip, cond, last, runner.rng)
            total = total + w_dm * loss_dm
        report = LossReport(
            stage=2,
            iteration=0,
            total=float(total.detach()),
            loss_wp=_scalar(loss_wp),
            loss_flag=_scalar(loss_flag),
            loss_dm=_scalar(loss_dm),
            rollout_steps=1,
        )
        return total, report

    result = runner.run(runner.loader(dataset), step)
    if generator is not None:
        generator.mark_ready()
    return result


def run_stage3(
    agent: DrivingAgent,
    dataset: Dataset,
    config: dict,
    stream: Optional[LossReportStream] = None,
) -> StageResult:
    """Train the LM on multi-step rollouts through the frozen generator.

    Step k >= 1 observes the final frame of the clip generated at step k - 1;
    labels and diffusion targets always come from the recorded episode.
    Sampling runs without gradient, the diffusion loss of every step
    back-propagates through the frozen generator into the world queries.
    """
    settings = StageConfig.for_stage(config, 3)
    generator = agent.generator
    if generator is not None and not bool(generator.ready):
        logging.getLogger("worldplan.training.stage3").warning(
            "Generator was not trained in Stage 2; rolling out from its initial weights"
        )
        generator.mark_ready()
    runner = StageRunner(agent, settings, config, stream)
    w_wp, w_flag, w_dm = settings.loss_weights
    depth = settings.rollout_depth

    def step(batch) -> Tuple[Tensor, LossReport]:
        ctx = agent.history_context(
            batch["history"], batch["instruction"][:, 0], batch["previous_action"][:, 0]
        )
        observation = batch["history"][:, -1]
        sums = {"wp": 0.0, "flag": 0.0, "dm": 0.0}
        total = torch.zeros(())
        for k in range(depth):
            if k > 0:
                ctx = ctx.with_instruction(batch["instruction"][:, k]).with_action(
                    batch["previous_action"][:, k]
                )
            loss_wp, loss_flag, world = planning_losses(
                agent, ctx, batch["waypoints"][:, k], batch["completed"][:, k]
            )
            step_total = w_wp * loss_wp + w_flag * loss_flag
            sums["wp"] += float(loss_wp.detach())
            sums["flag"] += float(loss_flag.detach())
            cond = None
            if generator is not None:
                cond = generator.condition(observation, world)
                loss_dm = generator.diffusion_loss(
                    batch["clip"][:, k], cond, observation, runner.rng
                )
                step_total = step_total + w_dm * loss_dm
                sums["dm"] += float(loss_dm.detach())
            total = total + step_total / depth
            if k == depth - 1:
                break
            with torch.no_grad():
                if generator is not None and cond is not None:
                    detached = MultiViewWorldEmbedding(cond.views.detach())
                    clip = generator.sample_clip(
                        observation, detached, runner.rng, settings.sample_steps
                    )
                    observation = clip.final_frame()
                else:
                    observation = batch["clip"][:, k, :, -1]
            ctx = ctx.push(agent.frame_features(observation))
        report = LossReport(
            stage=3,
            iteration=0,
            total=float(total.detach()),
            loss_wp=sums["wp"] / depth,
            loss_flag=sums["flag"] / depth,
            loss_dm=sums["dm"] / depth if generator is not None else None,
            rollout_steps=depth,
        )
        return total, report

    return runner.run(runner.loader(dataset), step)
