"""WorldPlan application class and command-line interface."""

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple

import click
from singer_sdk import typing as th  # JSON schema typing helpers

from worldplan.config import config_hash, dump_config, load_config, parse_override
from worldplan.errors import CheckpointError, WorldPlanError
from worldplan.eval.ablation import ARMS, ablation_suite, apply_arm
from worldplan.eval.agents import (
    ConstantThrottleAgent,
    DrivingPolicy,
    ExpertAgent,
    LearnedAgent,
    RandomWaypointAgent,
)
from worldplan.eval.closed_loop import evaluation_scenarios, run_closed_loop
from worldplan.eval.frechet import (
    FEATURE_NETS_FILE,
    FeatureNets,
    feature_samples,
    fit_feature_nets,
)
from worldplan.eval.horizon import ROLLOUT_MODES, long_horizon_study
from worldplan.generator.archive import write_clip_archive
from worldplan.generator.diffusion import sampler_calls
from worldplan.streams import GenQualityStream
from worldplan.training.checkpoint import CheckpointInfo, load_checkpoint
from worldplan.training.data import (
    CollectedDataset,
    collect_dataset,
    verify_dataset_labels,
)
from worldplan.training.model import DrivingAgent
from worldplan.training.pipeline import STAGES, checkpoint_path, train_curriculum

POLICIES = ("learned", "expert", "constant_throttle", "random_waypoint")


def _pid(kp: float, ki: float, kd: float) -> th.ObjectType:
    return th.ObjectType(
        th.Property("kp", th.NumberType, required=True, default=kp),
        th.Property("ki", th.NumberType, required=True, default=ki),
        th.Property("kd", th.NumberType, required=True, default=kd),
    )


class WorldPlan:
    """WorldPlan application class."""

    name = "worldplan"

    config_jsonschema = th.PropertiesList(
        th.Property(
            "seed",
            th.IntegerType,
            required=True,
            default=0,
            description="Seed of every random source (scenarios, weights, sampling)",
        ),
        th.Property(
            "out_dir",
            th.StringType,
            required=True,
            default="runs/worldplan",
            description="Directory every command reads from and writes into",
        ),
        th.Property(
            "log_level",
            th.StringType,
            required=True,
            default="INFO",
            description="The log level of the worldplan loggers",
        ),
        th.Property(
            "microworld",
            th.ObjectType(
                th.Property("dt", th.NumberType, required=True, default=0.1),
                th.Property(
                    "max_episode_steps", th.IntegerType, required=True, default=600
                ),
                th.Property("image_size", th.IntegerType, required=True, default=64),
                th.Property("view_range", th.NumberType, required=True, default=32.0),
                th.Property("side_yaw_deg", th.NumberType, required=True, default=60.0),
                th.Property("road_width", th.NumberType, required=True, default=8.0),
                th.Property(
                    "notice_distance", th.NumberType, required=True, default=15.0
                ),
                th.Property(
                    "deviation_tolerance", th.NumberType, required=True, default=3.0
                ),
                th.Property(
                    "misleading_rate", th.NumberType, required=True, default=0.1
                ),
                th.Property("wheelbase", th.NumberType, required=True, default=2.5),
                th.Property("length", th.NumberType, required=True, default=4.5),
                th.Property("width", th.NumberType, required=True, default=2.0),
                th.Property("max_speed", th.NumberType, required=True, default=10.0),
                th.Property("friction", th.NumberType, required=True, default=0.1),
                th.Property("max_accel", th.NumberType, required=True, default=4.0),
                th.Property("max_brake", th.NumberType, required=True, default=8.0),
                th.Property(
                    "max_steer_angle", th.NumberType, required=True, default=0.6
                ),
                th.Property(
                    "expert",
                    th.ObjectType(
                        th.Property("cruise_speed", th.NumberType, default=5.0),
                        th.Property("accel", th.NumberType, default=3.0),
                        th.Property("decel", th.NumberType, default=2.5),
                        th.Property("max_decel", th.NumberType, default=6.0),
                        th.Property("stop_margin", th.NumberType, default=1.5),
                        th.Property("follow_gap", th.NumberType, default=3.0),
                        th.Property("lookahead", th.NumberType, default=25.0),
                        th.Property("pedestrian_corridor", th.NumberType, default=3.5),
                        th.Property("vehicle_corridor", th.NumberType, default=1.5),
                        th.Property("turn_window", th.NumberType, default=40.0),
                        th.Property("stop_window", th.NumberType, default=4.0),
                        th.Property("standstill", th.NumberType, default=0.2),
                    ),
                    description="Driving style of the privileged expert",
                ),
            ),
            description="Simulator, rendering and ego kinematics",
        ),
        th.Property(
            "encoder",
            th.ObjectType(
                th.Property("d_model", th.IntegerType, required=True, default=128),
                th.Property("bev_size", th.IntegerType, required=True, default=20),
                th.Property("bev_range", th.NumberType, required=True, default=20.0),
                th.Property("layers", th.IntegerType, required=True, default=2),
                th.Property("heads", th.IntegerType, required=True, default=4),
                th.Property(
                    "loss_weights",
                    th.ObjectType(
                        th.Property("det", th.NumberType, required=True, default=1.0),
                        th.Property("wp", th.NumberType, required=True, default=1.0),
                        th.Property("light", th.NumberType, required=True, default=1.0),
                    ),
                ),
            ),
            description="Multi-view vision encoder and its Stage-1 pretraining",
        ),
        th.Property(
            "lm",
            th.ObjectType(
                th.Property("d_model", th.IntegerType, required=True, default=256),
                th.Property("layers", th.IntegerType, required=True, default=4),
                th.Property("heads", th.IntegerType, required=True, default=4),
                th.Property("t_max", th.IntegerType, required=True, default=8),
                th.Property(
                    "qformer_queries", th.IntegerType, required=True, default=8
                ),
                th.Property("qformer_layers", th.IntegerType, required=True, default=2),
                th.Property("action_queries", th.IntegerType, required=True, default=4),
                th.Property("world_queries", th.IntegerType, required=True, default=64),
                th.Property("max_context", th.IntegerType, required=True, default=256),
                th.Property(
                    "action_mode",
                    th.StringType,
                    required=True,
                    default="queries",
                    description="`queries` or `autoregressive` waypoint decoding",
                ),
                th.Property(
                    "instruction_length", th.IntegerType, required=True, default=16
                ),
                th.Property(
                    "completion_threshold", th.NumberType, required=True, default=0.5
                ),
            ),
            description="Q-Former and causal language core",
        ),
        th.Property(
            "generator",
            th.ObjectType(
                th.Property("frames", th.IntegerType, required=True, default=8),
                th.Property("cond_dim", th.IntegerType, required=True, default=128),
                th.Property(
                    "channels",
                    th.ArrayType(th.IntegerType),
                    required=True,
                    default=[64, 128, 128],
                ),
                th.Property(
                    "diffusion_steps", th.IntegerType, required=True, default=100
                ),
                th.Property("beta_start", th.NumberType, required=True, default=1e-4),
                th.Property("beta_end", th.NumberType, required=True, default=0.02),
                th.Property(
                    "reference_steps", th.IntegerType, required=True, default=1000
                ),
                th.Property(
                    "multiview_fusion", th.BooleanType, required=True, default=True
                ),
                th.Property(
                    "sample_steps",
                    th.IntegerType,
                    description="Respaced sampling steps; the full schedule if unset",
                ),
            ),
            description="Multi-view video diffusion world generator",
        ),
        th.Property(
            "control",
            th.ObjectType(
                th.Property("longitudinal", _pid(0.5, 0.05, 0.1), required=True),
                th.Property("lateral", _pid(1.0, 0.0, 0.2), required=True),
                th.Property("windup", th.NumberType, required=True, default=2.0),
                th.Property("feedforward", th.NumberType, required=True, default=0.025),
                th.Property("waypoint_dt", th.NumberType, required=True, default=0.2),
                th.Property(
                    "lookahead_index", th.IntegerType, required=True, default=1
                ),
                th.Property("stop_speed", th.NumberType, required=True, default=0.4),
            ),
            description="PID waypoint tracking",
        ),
        th.Property(
            "training",
            th.ObjectType(
                th.Property(
                    "iterations",
                    th.ObjectType(
                        th.Property("stage1", th.IntegerType, default=2000),
                        th.Property("stage2", th.IntegerType, default=2000),
                        th.Property("stage3", th.IntegerType, default=1000),
                    ),
                ),
                th.Property("lr", th.NumberType, required=True, default=1e-4),
                th.Property("weight_decay", th.NumberType, required=True, default=0.01),
                th.Property("batch_size", th.IntegerType, required=True, default=8),
                th.Property("rollout_depth", th.IntegerType, required=True, default=2),
                th.Property(
                    "rollout_sample_steps",
                    th.IntegerType,
                    default=10,
                    description="Sampling steps of Stage-3 imagined observations",
                ),
                th.Property(
                    "loss_weights",
                    th.ObjectType(
                        th.Property("wp", th.NumberType, required=True, default=1.0),
                        th.Property("flag", th.NumberType, required=True, default=0.5),
                        th.Property("dm", th.NumberType, required=True, default=1.0),
                    ),
                ),
                th.Property("log_every", th.IntegerType, required=True, default=50),
                th.Property("num_workers", th.IntegerType, required=True, default=0),
                th.Property(
                    "skip_stages",
                    th.ArrayType(th.IntegerType),
                    required=True,
                    default=[],
                ),
            ),
            description="Three-stage curriculum",
        ),
        th.Property(
            "collect",
            th.ObjectType(
                th.Property("scenarios", th.IntegerType, required=True, default=100),
                th.Property("steps", th.IntegerType, required=True, default=50),
                th.Property("track", th.StringType, required=True, default="short"),
                th.Property(
                    "feature_iterations", th.IntegerType, required=True, default=300
                ),
                th.Property(
                    "feature_samples", th.IntegerType, required=True, default=512
                ),
            ),
            description="Expert data collection",
        ),
        th.Property(
            "eval",
            th.ObjectType(
                th.Property("runs", th.IntegerType, required=True, default=3),
                th.Property("routes", th.IntegerType, required=True, default=10),
                th.Property("track", th.StringType, required=True, default="short"),
                th.Property(
                    "penalties",
                    th.ObjectType(
                        th.Property("collision_pedestrian", th.NumberType, default=0.5),
                        th.Property("collision_vehicle", th.NumberType, default=0.6),
                        th.Property("red_light_violation", th.NumberType, default=0.7),
                        th.Property("route_deviation", th.NumberType, default=1.0),
                    ),
                ),
                th.Property(
                    "horizons",
                    th.ArrayType(th.IntegerType),
                    required=True,
                    default=[8, 16, 24, 32, 64, 128],
                ),
                th.Property(
                    "compare_horizons",
                    th.ArrayType(th.IntegerType),
                    required=True,
                    default=[8, 64],
                ),
                th.Property(
                    "horizon_scenarios", th.IntegerType, required=True, default=20
                ),
                th.Property(
                    "horizon_track", th.StringType, required=True, default="long"
                ),
                th.Property("frechet_eps", th.NumberType, required=True, default=1e-6),
                th.Property("bootstrap", th.IntegerType, required=True, default=1000),
            ),
            description="Closed-loop benchmark and generation-quality study",
        ),
    ).to_dict()

    def __init__(
        self,
        config_path: Optional[Path] = None,
        overrides: Sequence[dict] = (),
    ):
        """Initialize the application from a config file and overrides."""
        self.config = load_config(self.config_jsonschema, config_path, overrides)
        self.logger = logging.getLogger(self.name)
        setup_logging(self.config["log_level"])

    @classmethod
    def default_config(cls) -> dict:
        """Return the validated configuration made of every property default."""
        return load_config(cls.config_jsonschema)

    @property
    def out_dir(self) -> Path:
        """Return the output root."""
        return Path(self.config["out_dir"])

    @property
    def dataset_dir(self) -> Path:
        """Return where `collect` writes and `train` reads the dataset."""
        return self.out_dir / "dataset"

    @property
    def config_hash(self) -> str:
        """Return the hash stamped into every output."""
        return config_hash(self.config)

    def latest_checkpoint(self) -> Path:
        """Return the checkpoint of the last trained stage."""
        for stage in reversed(STAGES):
            path = checkpoint_path(self.out_dir, stage)
            if path.exists():
                return path
        raise CheckpointError(f"No checkpoint under {self.out_dir / 'checkpoints'}")

    def load_model(
        self, checkpoint: Optional[Path] = None
    ) -> Tuple[DrivingAgent, CheckpointInfo]:
        """Load the given checkpoint, or the latest one."""
        path = Path(checkpoint) if checkpoint else self.latest_checkpoint()
        self.logger.info("Loading checkpoint %s", path)
        return load_checkpoint(path, self.config)

    def feature_nets(self) -> FeatureNets:
        """Load the proxy feature networks fitted by `collect`."""
        return FeatureNets.load(self.dataset_dir / FEATURE_NETS_FILE)

    def collect(self, verify: bool = False) -> dict:
        """Collect the expert dataset and fit the proxy feature networks."""
        info = collect_dataset(self.config, self.dataset_dir)
        dump_config(self.config, self.dataset_dir)
        section = self.config["collect"]
        data = CollectedDataset(self.dataset_dir)
        images, clips = feature_samples(
            [data.frames(episode) for episode in data.episodes],
            int(self.config["generator"]["frames"]),
            int(section["feature_samples"]),
            seed=int(self.config["seed"]),
        )
        nets = fit_feature_nets(
            images,
            clips,
            iterations=int(section["feature_iterations"]),
            seed=int(self.config["seed"]),
        )
        nets.save(self.dataset_dir / FEATURE_NETS_FILE)
        summary = {
            "tuples": info.count,
            "episodes": info.episodes,
            "checksum": info.checksum,
            "feature_checksum": nets.checksum,
            "config_hash": self.config_hash,
        }
        if verify:
            summary["max_label_error"] = verify_dataset_labels(
                self.dataset_dir, self.config
            )
        return summary

    def train(
        self,
        stages: Optional[Sequence[int]] = None,
        skip_stages: Optional[Sequence[int]] = None,
    ) -> List[CheckpointInfo]:
        """Run the curriculum into `<out>/checkpoints`."""
        dump_config(self.config, self.out_dir)
        return train_curriculum(
            self.config, self.dataset_dir, self.out_dir, stages, skip_stages
        )

    def policy(
        self, name: str, checkpoint: Optional[Path] = None
    ) -> Tuple[DrivingPolicy, Optional[str]]:
        """Build a policy to evaluate and return it with its checkpoint hash."""
        if name == "learned":
            model, info = self.load_model(checkpoint)
            return LearnedAgent(model, self.config), info.checkpoint_hash
        if name == "expert":
            return ExpertAgent(self.config), None
        if name == "constant_throttle":
            return ConstantThrottleAgent(), None
        if name == "random_waypoint":
            return RandomWaypointAgent(self.config, seed=int(self.config["seed"])), None
        raise WorldPlanError(f"Unknown policy '{name}', expected one of {POLICIES}")

    def evaluate(
        self,
        policy_name: str = "learned",
        runs: Optional[int] = None,
        checkpoint: Optional[Path] = None,
    ) -> dict:
        """Run the closed-loop benchmark in online planning mode."""
        out = self.out_dir / "eval" / policy_name
        dump_config(self.config, out)
        for stale in ("episode_steps.jsonl", "route_metrics.jsonl"):
            (out / stale).unlink(missing_ok=True)
        policy, checkpoint_hash = self.policy(policy_name, checkpoint)
        calls_before = sampler_calls()
        report = run_closed_loop(
            policy,
            evaluation_scenarios(self.config),
            self.config,
            runs=runs,
            out_dir=out,
            config_hash=self.config_hash,
            checkpoint_hash=checkpoint_hash,
        )
        calls = sampler_calls() - calls_before
        if calls:
            raise WorldPlanError(
                f"Online planning invoked the diffusion sampler {calls} times"
            )
        summary = {
            **report.to_dict(),
            "sampler_calls": calls,
            "config_hash": self.config_hash,
            "checkpoint_hash": checkpoint_hash,
        }
        (out / "metrics.json").write_text(json.dumps(summary, indent=2))
        click.echo(report.table())
        return summary

    def rollout(
        self,
        horizon: Optional[int] = None,
        checkpoint: Optional[Path] = None,
        scenarios: Optional[int] = None,
    ) -> dict:
        """Roll the world generator out and score it at every horizon."""
        section = self.config["eval"]
        out = self.out_dir / "rollout"
        dump_config(self.config, out)
        for stale in ("gen_quality.jsonl", "clips/clip_frames.jsonl"):
            (out / stale).unlink(missing_ok=True)
        horizons = [int(h) for h in section["horizons"]]
        if horizon is not None:
            horizons = sorted({h for h in horizons if h <= horizon} | {horizon})
        model, info = self.load_model(checkpoint)
        routes = evaluation_scenarios(
            self.config,
            count=scenarios or section["horizon_scenarios"],
            track=section["horizon_track"],
        )
        study = long_horizon_study(
            model,
            routes,
            self.config,
            self.feature_nets(),
            horizons=horizons,
            modes=ROLLOUT_MODES,
            seed=int(self.config["seed"]),
            keep_videos=True,
        )
        frame_dt = float(self.config["microworld"]["dt"])
        for mode, videos in study.videos.items():
            for index, video in enumerate(videos):
                write_clip_archive(
                    video,
                    out / "clips",
                    f"{mode}-{index:03d}",
                    frame_dt=frame_dt,
                    config_hash=self.config_hash,
                    checkpoint_hash=info.checkpoint_hash,
                )
        GenQualityStream(out / "gen_quality.jsonl").write(
            r.to_record(self.config_hash, info.checkpoint_hash) for r in study.reports
        )
        summary = {
            "horizons": horizons,
            "config_hash": self.config_hash,
            "checkpoint_hash": info.checkpoint_hash,
            "bootstrap": None,
        }
        if study.bootstrap is not None:
            summary["bootstrap"] = {
                **asdict(study.bootstrap),
                "significant": study.bootstrap.significant,
            }
        (out / "horizon_study.json").write_text(json.dumps(summary, indent=2))
        click.echo(study.table())
        return summary

    def ablate(self, arms: Sequence[str], runs: Optional[int] = None) -> List[dict]:
        """Train and evaluate every requested ablation arm."""
        out = self.out_dir / "ablate"
        dump_config(self.config, out)
        (out / "ablation_rows.jsonl").unlink(missing_ok=True)
        nets_path = self.dataset_dir / FEATURE_NETS_FILE
        nets = FeatureNets.load(nets_path) if nets_path.exists() else None
        table = ablation_suite(
            self.config, arms or list(ARMS), self.dataset_dir, out, nets, runs
        )
        click.echo(table.table())
        return table.rows


def setup_logging(level: str) -> None:
    """Configure the `worldplan` logger hierarchy once."""
    logger = logging.getLogger("worldplan")
    logger.setLevel(level.upper())
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        logger.addHandler(handler)


def _common_options(command: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option(
            "--config",
            "config_path",
            type=click.Path(dir_okay=False, path_type=Path),
            help="YAML or JSON config file layered over the defaults.",
        ),
        click.option("--seed", type=int, help="Override the run seed."),
        click.option(
            "--out",
            "out_dir",
            type=click.Path(file_okay=False, path_type=Path),
            help="Output directory.",
        ),
        click.option(
            "--set",
            "settings",
            multiple=True,
            metavar="KEY=VALUE",
            help="Dotted config override, for example lm.t_max=4.",
        ),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _app(
    config_path: Optional[Path],
    seed: Optional[int],
    out_dir: Optional[Path],
    settings: Sequence[str],
    arm: Optional[str] = None,
) -> WorldPlan:
    overrides = [parse_override(s) for s in settings]
    if seed is not None:
        overrides.append({"seed": seed})
    if out_dir is not None:
        overrides.append({"out_dir": str(out_dir)})
    app = WorldPlan(config_path, overrides)
    if arm is not None:
        app.config = apply_arm(app.config, arm)
    return app


def _run(action: Callable[[], Any]) -> Any:
    try:
        return action()
    except WorldPlanError as error:
        raise click.ClickException(str(error)) from error


@click.group(name=WorldPlan.name)
def cli() -> None:
    """Language-conditioned driving planner with a multi-view world model."""


@cli.command()
@_common_options
@click.option("--verify", is_flag=True, help="Replay every label after collecting.")
def collect(config_path, seed, out_dir, settings, verify) -> None:
    """Run the expert over scripted scenarios and persist the dataset."""
    app = _run(lambda: _app(config_path, seed, out_dir, settings))
    summary = _run(lambda: app.collect(verify))
    click.echo(json.dumps(summary, indent=2))


@cli.command()
@_common_options
@click.option(
    "--stage",
    "stages",
    type=click.IntRange(1, 3),
    multiple=True,
    help="Stage to run; repeat for several. All stages by default.",
)
@click.option(
    "--skip-stage",
    "skip_stages",
    type=click.IntRange(1, 3),
    multiple=True,
    help="Stage to leave out of the curriculum.",
)
@click.option("--arm", type=click.Choice(list(ARMS)), help="Train an ablation arm.")
def train(config_path, seed, out_dir, settings, stages, skip_stages, arm) -> None:
    """Run the three-stage curriculum."""
    app = _run(lambda: _app(config_path, seed, out_dir, settings, arm))
    infos = _run(
        lambda: app.train(list(stages) or None, list(skip_stages) or None)
    )
    for info in infos:
        click.echo(f"{info.stage}: {info.checkpoint_hash[:12]} {info.path}")


@cli.command(name="eval")
@_common_options
@click.option("--runs", type=int, help="Number of evaluation runs.")
@click.option(
    "--policy", type=click.Choice(POLICIES), default="learned", show_default=True
)
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path))
def evaluate(config_path, seed, out_dir, settings, runs, policy, checkpoint) -> None:
    """Evaluate a policy closed-loop in online planning mode."""
    app = _run(lambda: _app(config_path, seed, out_dir, settings))
    _run(lambda: app.evaluate(policy, runs, checkpoint))


@cli.command()
@_common_options
@click.option("--horizon", type=int, help="Longest rollout horizon in frames.")
@click.option("--scenarios", type=int, help="Number of scenarios to roll out.")
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path))
def rollout(
    config_path, seed, out_dir, settings, horizon, scenarios, checkpoint
) -> None:
    """Generate autoregressive rollouts and the long-horizon study."""
    app = _run(lambda: _app(config_path, seed, out_dir, settings))
    _run(lambda: app.rollout(horizon, checkpoint, scenarios))


@cli.command()
@_common_options
@click.option(
    "--arm",
    "arms",
    type=click.Choice(list(ARMS)),
    multiple=True,
    help="Arm to run; repeat for several. All arms by default.",
)
@click.option("--runs", type=int, help="Number of evaluation runs per arm.")
def ablate(config_path, seed, out_dir, settings, arms, runs) -> None:
    """Train and evaluate ablation arms."""
    app = _run(lambda: _app(config_path, seed, out_dir, settings))
    _run(lambda: app.ablate(list(arms), runs))


WorldPlan.cli = cli  # type: ignore[attr-defined]
