"""Long-horizon generation study: proxy FID/FVD against simulator clips per horizon."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from worldplan.control.pid import target_speed
from worldplan.errors import ConfigError, GeneratorNotReadyError
from worldplan.eval.agents import ExpertAgent
from worldplan.eval.frechet import FeatureNets, fit_gaussian, frechet_distance
from worldplan.generator.rollout import autoregressive_rollout, concatenate
from worldplan.lm.core import SequenceContext
from worldplan.microworld.episode import DrivingEpisode
from worldplan.microworld.render import Renderer
from worldplan.microworld.scenario import Scenario
from worldplan.training.model import DrivingAgent

logger = logging.getLogger("worldplan.eval.horizon")

ROLLOUT_MODES = ("autoregressive", "teacher_forced")


@dataclass
class GenQualityReport:
    """Proxy generation quality at one horizon."""

    horizon: int
    mode: str
    fid_proxy: float
    fvd_proxy: float
    samples: int
    regularization: float
    feature_checksum: str

    def to_record(
        self, config_hash: Optional[str] = None, checkpoint_hash: Optional[str] = None
    ) -> dict:
        """Return a `gen_quality` stream record."""
        record = {
            "horizon": self.horizon,
            "mode": self.mode,
            "fid_proxy": self.fid_proxy,
            "fvd_proxy": self.fvd_proxy,
            "samples": self.samples,
            "regularization": self.regularization,
            "feature_checksum": self.feature_checksum,
            "checkpoint_hash": checkpoint_hash,
        }
        if config_hash is not None:
            record["config_hash"] = config_hash
        return record


@dataclass(frozen=True)
class BootstrapResult:
    """Paired bootstrap of the FVD increase between two horizons."""

    low: int
    high: int
    delta: float
    ci_low: float
    ci_high: float
    fraction_positive: float

    @property
    def significant(self) -> bool:
        """Return whether the whole confidence interval lies above zero."""
        return self.ci_low > 0.0


@dataclass
class HorizonStudy:
    """Per-horizon reports plus the degradation test and the generated videos."""

    reports: List[GenQualityReport] = field(default_factory=list)
    bootstrap: Optional[BootstrapResult] = None
    videos: Dict[str, np.ndarray] = field(default_factory=dict)

    def report(self, horizon: int, mode: str = "autoregressive") -> GenQualityReport:
        """Return the report of one horizon and mode."""
        for report in self.reports:
            if report.horizon == horizon and report.mode == mode:
                return report
        raise KeyError(f"No report for horizon {horizon} in mode {mode}")

    def table(self) -> str:
        """Return the degradation table as text."""
        lines = [f"{'mode':<16}{'horizon':>8}{'FID':>12}{'FVD':>12}{'samples':>9}"]
        for r in self.reports:
            lines.append(
                f"{r.mode:<16}{r.horizon:>8}{r.fid_proxy:>12.4f}"
                f"{r.fvd_proxy:>12.4f}{r.samples:>9}"
            )
        if self.bootstrap is not None:
            b = self.bootstrap
            lines.append(
                f"FVD(h={b.high}) - FVD(h={b.low}) = {b.delta:.4f}, "
                f"95% CI [{b.ci_low:.4f}, {b.ci_high:.4f}]"
            )
        return "\n".join(lines)


def expert_reference(
    scenario: Scenario, config: dict, steps: int, renderer: Optional[Renderer] = None
) -> Optional[Tuple[np.ndarray, List[str]]]:
    """Drive the expert for `steps` ticks.

    Returns the frames 0..steps (steps + 1, views, h, w, 3) and the
    instruction text at every tick, or None if the episode ends early.
    """
    episode = DrivingEpisode(scenario, config["microworld"], renderer)
    expert = ExpertAgent(config)
    frame = episode.reset()
    expert.reset(episode)
    frames = [frame.images.astype(np.float32)]
    texts = []
    for _ in range(steps):
        texts.append(episode.current_instruction().text)
        _, _, done = episode.step(expert.act(episode, frame))
        frame = episode.observe()
        frames.append(frame.images.astype(np.float32))
        if done and len(frames) <= steps:
            return None
    return np.stack(frames), texts


class ImaginationPlanner:
    """Planner callback for offline rollouts of a batch of scenarios.

    Every call observes one frame per scenario, plans, remembers the
    predicted action as the next step's previous action and returns the world
    features the generator conditions on.
    """

    def __init__(
        self, model: DrivingAgent, instructions: Sequence[Sequence[str]], dt: float
    ):
        """Initialize with the instruction texts of every step, one list per step."""
        self.model = model
        self.instructions = instructions
        self.dt = dt
        self.step = 0
        self.ctx: Optional[SequenceContext] = None
        self.previous: Optional[Tensor] = None

    def __call__(self, frame: Tensor) -> Tensor:
        """Plan on `frame` (batch, views, h, w, 3) and return the world features."""
        model = self.model
        texts = self.instructions[min(self.step, len(self.instructions) - 1)]
        instruction = model.encode_instructions(texts)
        feature = model.frame_features(frame.to(model.device))
        if self.ctx is None:
            self.ctx = SequenceContext.start(instruction, feature, model.lm.t_max)
        else:
            self.ctx = self.ctx.advance(instruction, feature, self.previous)
        plan, world = model.plan(self.ctx)
        self.previous = predicted_action(plan.waypoints, self.dt)
        self.step += 1
        return world


def predicted_action(waypoints: Tensor, waypoint_dt: float) -> Tensor:
    """Turn planned waypoints into a coarse (throttle, brake, steer) action."""
    rows = []
    for plan in waypoints.detach().cpu().double().numpy():
        speed = target_speed(plan, waypoint_dt)
        heading = float(np.arctan2(plan[1, 1], max(plan[1, 0], 1e-3)))
        moving = speed > 0.4
        throttle = min(speed / 10.0, 1.0) if moving else 0.0
        brake = 0.0 if moving else 1.0
        rows.append([throttle, brake, float(np.clip(heading, -1.0, 1.0))])
    return torch.tensor(rows, dtype=torch.float32)


def _chunk_features(nets: FeatureNets, videos: np.ndarray, frames: int) -> np.ndarray:
    """Return per-chunk clip features (batch, views, chunks, dim)."""
    b, v, t = videos.shape[:3]
    chunks = videos.reshape(b * v * (t // frames), frames, *videos.shape[3:])
    return nets.features(chunks, "video").reshape(b, v, t // frames, -1)


def _frame_features(nets: FeatureNets, videos: np.ndarray) -> np.ndarray:
    b, v, t = videos.shape[:3]
    images = videos.reshape(b * v * t, *videos.shape[3:])
    return nets.features(images, "image").reshape(b, v, t, -1)


def _distance(
    real: np.ndarray, generated: np.ndarray, eps: float
) -> Tuple[float, float]:
    result = frechet_distance(
        *fit_gaussian(real.reshape(-1, real.shape[-1])),
        *fit_gaussian(generated.reshape(-1, generated.shape[-1])),
        eps=eps,
    )
    return result.distance, result.regularization


def paired_bootstrap(
    real: np.ndarray,
    generated: np.ndarray,
    low_chunks: int,
    high_chunks: int,
    frames: int,
    samples: int = 200,
    seed: int = 0,
    eps: float = 1e-6,
) -> BootstrapResult:
    """Bootstrap FVD(high) - FVD(low) by resampling scenarios with replacement.

    `real` and `generated` hold clip features (scenarios, views, chunks, dim);
    both horizons are evaluated on the same resampled scenarios.
    """
    rng = np.random.default_rng(seed)
    count = real.shape[0]

    def delta(index: np.ndarray) -> float:
        real_part, gen_part = real[index], generated[index]
        high, _ = _distance(
            real_part[:, :, :high_chunks], gen_part[:, :, :high_chunks], eps
        )
        low, _ = _distance(
            real_part[:, :, :low_chunks], gen_part[:, :, :low_chunks], eps
        )
        return high - low

    point = delta(np.arange(count))
    draws = np.array(
        [delta(rng.integers(0, count, size=count)) for _ in range(samples)]
    )
    return BootstrapResult(
        low=low_chunks * frames,
        high=high_chunks * frames,
        delta=point,
        ci_low=float(np.quantile(draws, 0.025)),
        ci_high=float(np.quantile(draws, 0.975)),
        fraction_positive=float(np.mean(draws > 0.0)),
    )


def compare_horizons(horizons: Sequence[int], wanted: Sequence[int]) -> Tuple[int, int]:
    """Return the pair of horizons the bootstrap compares.

    Falls back to the shortest and longest studied horizon when the wanted
    pair was not studied.
    """
    low, high = (int(h) for h in wanted)
    if low in horizons and high in horizons:
        return low, high
    return horizons[0], horizons[-1]


@torch.no_grad()
def long_horizon_study(
    model: DrivingAgent,
    scenarios: Sequence[Scenario],
    config: dict,
    nets: FeatureNets,
    horizons: Optional[Sequence[int]] = None,
    modes: Sequence[str] = ROLLOUT_MODES,
    seed: int = 0,
    keep_videos: bool = False,
) -> HorizonStudy:
    """Roll the generator out to every horizon and score it against expert drives.

    One rollout to the longest horizon serves every shorter one, because clip
    k of a long rollout is exactly clip k of a shorter rollout with the same
    seed.
    """
    if model.generator is None:
        raise GeneratorNotReadyError("This model has no world generator to roll out")
    section = config["eval"]
    frames = int(config["generator"]["frames"])
    horizons = sorted(int(h) for h in (horizons or section["horizons"]))
    bad = [h for h in horizons if h < frames or h % frames]
    if bad:
        raise ConfigError(
            f"Horizons {bad} are not positive multiples of the clip length {frames}"
        )
    longest = horizons[-1]
    steps = longest // frames
    eps = float(section["frechet_eps"])

    renderer = Renderer.from_config(config["microworld"])
    references, texts, names = [], [], []
    for scenario in scenarios:
        reference = expert_reference(scenario, config, longest, renderer)
        if reference is None:
            logger.warning("%s ends before %d steps; left out", scenario.name, longest)
            continue
        references.append(reference[0])
        texts.append(reference[1])
        names.append(scenario.name)
    if len(references) < 2:
        raise ConfigError(f"Only {len(references)} scenarios last {longest} steps")
    truth = np.stack(references)  # (batch, steps + 1, views, h, w, 3)
    init = torch.from_numpy(truth[:, 0])
    instructions = [[t[k * frames] for t in texts] for k in range(steps)]
    teacher = [torch.from_numpy(truth[:, (k + 1) * frames]) for k in range(steps - 1)]
    real_video = truth[:, 1:].transpose(0, 2, 1, 3, 4, 5)  # (batch, views, T, h, w, 3)
    real_clips = _chunk_features(nets, real_video, frames)
    real_frames = _frame_features(nets, real_video)

    model.eval()
    study = HorizonStudy()
    for mode in modes:
        if mode not in ROLLOUT_MODES:
            raise ValueError(f"Unknown rollout mode '{mode}'")
        waypoint_dt = float(config["control"]["waypoint_dt"])
        planner = ImaginationPlanner(model, instructions, waypoint_dt)
        clips = autoregressive_rollout(
            init,
            steps,
            planner,
            model.generator,
            torch.Generator().manual_seed(seed),
            teacher_frames=teacher if mode == "teacher_forced" else None,
        )
        video = concatenate(clips).cpu().numpy()
        if keep_videos:
            study.videos[mode] = video
        gen_clips = _chunk_features(nets, video, frames)
        gen_frames = _frame_features(nets, video)
        for horizon in horizons:
            chunks = horizon // frames
            fvd, reg_v = _distance(
                real_clips[:, :, :chunks], gen_clips[:, :, :chunks], eps
            )
            fid, reg_i = _distance(
                real_frames[:, :, :horizon], gen_frames[:, :, :horizon], eps
            )
            study.reports.append(
                GenQualityReport(
                    horizon=horizon,
                    mode=mode,
                    fid_proxy=fid,
                    fvd_proxy=fvd,
                    samples=int(np.prod(gen_clips[:, :, :chunks].shape[:3])),
                    regularization=max(reg_v, reg_i),
                    feature_checksum=nets.checksum,
                )
            )
            logger.info("%s h=%d: FID %.4f FVD %.4f", mode, horizon, fid, fvd)
        low, high = compare_horizons(horizons, section["compare_horizons"])
        if mode == "autoregressive" and low < high:
            study.bootstrap = paired_bootstrap(
                real_clips,
                gen_clips,
                low // frames,
                high // frames,
                frames,
                samples=int(section["bootstrap"]),
                seed=seed,
                eps=eps,
            )
    logger.info("Horizon study over %d scenarios: %s", len(names), ", ".join(names))
    return study
