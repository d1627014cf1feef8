"""Ablation arms: named config deltas, trained and evaluated side by side."""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from worldplan.config import config_hash, deep_merge, dump_config
from worldplan.errors import UnknownArmError
from worldplan.eval.agents import LearnedAgent
from worldplan.eval.closed_loop import (
    MetricsReport,
    evaluation_scenarios,
    run_closed_loop,
)
from worldplan.eval.frechet import FeatureNets
from worldplan.eval.horizon import long_horizon_study
from worldplan.streams import AblationStream
from worldplan.training.checkpoint import load_checkpoint
from worldplan.training.pipeline import train_curriculum

logger = logging.getLogger("worldplan.eval.ablation")

TABLES = ("planning", "generation", "stages")
BASELINE = "baseline"


@dataclass(frozen=True)
class ArmSpec:
    """A config delta and the comparison table it belongs to.

    `move_iterations` is a (from, to) pair of stages: the budget of the first
    is added to the second, so the arm trains for the same total number of
    iterations as the baseline.
    """

    name: str
    table: str
    overrides: Mapping = field(default_factory=dict)
    skip_stages: Tuple[int, ...] = ()
    move_iterations: Optional[Tuple[int, int]] = None


ARMS: Dict[str, ArmSpec] = {
    spec.name: spec
    for spec in (
        ArmSpec(BASELINE, "planning"),
        ArmSpec(
            "w/o world generator",
            "planning",
            {"lm": {"world_queries": 0}, "training": {"loss_weights": {"dm": 0.0}}},
        ),
        ArmSpec(
            "w/o action queries", "planning", {"lm": {"action_mode": "autoregressive"}}
        ),
        ArmSpec("w/o visual pre-training", "planning", skip_stages=(1,)),
        ArmSpec(
            "w/o stage-3 training", "stages", skip_stages=(3,), move_iterations=(3, 2)
        ),
        ArmSpec(
            "w/o stage-2 training", "stages", skip_stages=(2,), move_iterations=(2, 3)
        ),
        ArmSpec("world queries: 64->32", "generation", {"lm": {"world_queries": 32}}),
        ArmSpec("world queries: 64->16", "generation", {"lm": {"world_queries": 16}}),
        ArmSpec(
            "w/o multiview fusion",
            "generation",
            {"generator": {"multiview_fusion": False}},
        ),
    )
}

# Stage arms are compared on long routes, where rollout training should matter.
TABLE_TRACKS = {"stages": "long"}


def arm_slug(name: str) -> str:
    """Return a directory-safe name for an arm."""
    return re.sub(r"[^a-z0-9]+", "-", name.lower().replace("w/o", "wo")).strip("-")


def get_arm(name: str) -> ArmSpec:
    """Return the registered arm, raising `UnknownArmError` for anything else."""
    if name not in ARMS:
        raise UnknownArmError(
            f"Unknown ablation arm '{name}', expected one of {list(ARMS)}"
        )
    return ARMS[name]


def apply_arm(config: dict, name: str) -> dict:
    """Return a copy of `config` with the arm's delta applied."""
    spec = get_arm(name)
    arm_config = deep_merge(config, dict(spec.overrides))
    training = arm_config["training"]
    if spec.skip_stages:
        skipped = set(training["skip_stages"]) | set(spec.skip_stages)
        training["skip_stages"] = sorted(skipped)
    if spec.move_iterations is not None:
        source, target = (f"stage{s}" for s in spec.move_iterations)
        iterations = training["iterations"]
        iterations[target] = int(iterations[target]) + int(iterations[source])
    return arm_config


@dataclass
class AblationTable:
    """Ablation rows grouped by comparison table."""

    rows: List[dict] = field(default_factory=list)

    def table(self) -> str:
        """Return every comparison table as text."""
        lines: List[str] = []
        for name in TABLES:
            rows = [r for r in self.rows if r["table"] == name]
            if not rows:
                continue
            lines.append(f"[{name}]")
            lines.append(
                f"{'arm':<28}{'DS':>9}{'+-':>8}{'RC':>9}{'IS':>9}{'FID':>10}{'FVD':>10}"
            )
            for row in rows:
                cells = [
                    _cell(row.get(key), width)
                    for key, width in (
                        ("driving_score", 9),
                        ("driving_score_std", 8),
                        ("route_completion", 9),
                        ("infraction_score", 9),
                        ("fid_proxy", 10),
                        ("fvd_proxy", 10),
                    )
                ]
                lines.append(f"{row['arm']:<28}" + "".join(cells))
        return "\n".join(lines)


def _cell(value: Optional[float], width: int) -> str:
    return f"{'-':>{width}}" if value is None else f"{value:>{width}.4f}"


def _tables_of(name: str, wanted: Sequence[str]) -> List[str]:
    if name == BASELINE:
        return list(wanted)
    return [ARMS[name].table]


def ablation_suite(
    config: dict,
    arms: Sequence[str],
    dataset_dir: Path,
    out_dir: Path,
    nets: Optional[FeatureNets] = None,
    runs: Optional[int] = None,
) -> AblationTable:
    """Train and evaluate every arm, returning and streaming the comparison rows.

    The baseline is trained once and reported in every table another arm
    belongs to. Generation columns are filled only when feature networks are
    given and the arm still has a world generator.
    """
    names = list(dict.fromkeys(arms))
    for name in names:
        get_arm(name)
    wanted = sorted({ARMS[n].table for n in names}, key=TABLES.index) or ["planning"]
    out_dir = Path(out_dir)
    stream = AblationStream(out_dir / "ablation_rows.jsonl")
    result = AblationTable()
    for name in names:
        arm_config = apply_arm(config, name)
        arm_dir = out_dir / "arms" / arm_slug(name)
        dump_config(arm_config, arm_dir)
        arm_hash = config_hash(arm_config)
        logger.info("Arm '%s': training into %s", name, arm_dir)
        infos = train_curriculum(arm_config, dataset_dir, arm_dir)
        if not infos:
            logger.warning("Arm '%s' trained no stage; left out", name)
            continue
        model, info = load_checkpoint(infos[-1].path, arm_config)
        reports: Dict[str, MetricsReport] = {}
        for table in _tables_of(name, wanted):
            track = TABLE_TRACKS.get(table, arm_config["eval"]["track"])
            if track not in reports:
                reports[track] = run_closed_loop(
                    LearnedAgent(model, arm_config),
                    evaluation_scenarios(arm_config, track=track),
                    arm_config,
                    runs=runs,
                    out_dir=arm_dir / f"eval-{track}",
                    config_hash=arm_hash,
                    checkpoint_hash=info.checkpoint_hash,
                )
            report = reports[track]
            row = {
                "arm": name,
                "table": table,
                "track": track,
                "runs": report.runs,
                "driving_score": report.ds,
                "driving_score_std": report.ds_std,
                "route_completion": report.rc,
                "infraction_score": report.is_,
                "fid_proxy": None,
                "fvd_proxy": None,
                "config_hash": arm_hash,
                "checkpoint_hash": info.checkpoint_hash,
            }
            generator = model.generator
            if table == "generation" and nets is not None and generator is not None:
                frames = int(arm_config["generator"]["frames"])
                study = long_horizon_study(
                    model,
                    evaluation_scenarios(arm_config),
                    arm_config,
                    nets,
                    horizons=[frames],
                    modes=("autoregressive",),
                    seed=int(arm_config["seed"]),
                )
                quality = study.report(frames)
                row["fid_proxy"] = quality.fid_proxy
                row["fvd_proxy"] = quality.fvd_proxy
            stream.write([row])
            result.rows.append(row)
    return result
