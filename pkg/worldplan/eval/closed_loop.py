"""Closed-loop benchmark: route completion, infraction score and driving score."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from worldplan.eval.agents import DrivingPolicy
from worldplan.microworld.episode import DrivingEpisode
from worldplan.microworld.infractions import INFRACTION_KINDS
from worldplan.microworld.render import Renderer
from worldplan.microworld.scenario import Scenario, generate_scenario
from worldplan.streams import EpisodeStepsStream, RouteMetricsStream

logger = logging.getLogger("worldplan.eval")

DEFAULT_PENALTIES = {
    "collision_pedestrian": 0.5,
    "collision_vehicle": 0.6,
    "red_light_violation": 0.7,
    "route_deviation": 1.0,
}


def check_penalties(penalties: Mapping[str, float]) -> Dict[str, float]:
    """Return the penalties as floats; kinds must be known and values in (0, 1]."""
    checked = {}
    for kind, value in penalties.items():
        if kind not in INFRACTION_KINDS:
            raise ValueError(f"Unknown infraction kind '{kind}'")
        if not 0.0 < float(value) <= 1.0:
            raise ValueError(f"Penalty of {kind} must lie in (0, 1], got {value}")
        checked[kind] = float(value)
    return checked


def infraction_score(kinds: Iterable[str], penalties: Mapping[str, float]) -> float:
    """Return the product of the penalties of `kinds`, multiplied in order."""
    score = 1.0
    for kind in kinds:
        score *= penalties[kind]
    return score


def infraction_score_from_log(
    records: Iterable[dict], penalties: Mapping[str, float]
) -> float:
    """Recompute the infraction score of one episode from its step records."""
    ordered = sorted(records, key=lambda record: record["step"])
    kinds = [
        event["kind"] for record in ordered for event in record.get("infractions", [])
    ]
    return infraction_score(kinds, penalties)


@dataclass
class RouteResult:
    """Outcome of one route in one evaluation run."""

    route: str
    run: int
    seed: int
    track: str
    route_completion: float
    infraction_score: float
    driving_score: float
    infractions: Dict[str, int]
    steps: int
    termination: Optional[str]

    def to_record(
        self, config_hash: Optional[str] = None, checkpoint_hash: Optional[str] = None
    ) -> dict:
        """Return a `route_metrics` stream record."""
        record = asdict(self)
        if config_hash is not None:
            record["config_hash"] = config_hash
        record["checkpoint_hash"] = checkpoint_hash
        return record


@dataclass
class MetricsReport:
    """Aggregate closed-loop metrics.

    `rc` and `is_` are means over every route of every run and `ds` is their
    product. The spread fields are standard deviations of the per-run values.
    `mean_route_ds` averages the per-route driving scores instead.
    """

    rc: float
    is_: float
    ds: float
    rc_std: float
    is_std: float
    ds_std: float
    mean_route_ds: float
    runs: int
    routes: List[RouteResult] = field(default_factory=list)
    infraction_counts: Dict[str, int] = field(default_factory=dict)
    penalties: Dict[str, float] = field(default_factory=dict)
    policy: str = ""

    @classmethod
    def from_routes(
        cls,
        results: Sequence[RouteResult],
        penalties: Mapping[str, float],
        policy: str = "",
    ) -> "MetricsReport":
        """Aggregate per-route results."""
        if not results:
            raise ValueError("Cannot aggregate an empty set of route results")
        rc = float(np.mean([r.route_completion for r in results]))
        is_ = float(np.mean([r.infraction_score for r in results]))
        per_run = {}
        for run in sorted({r.run for r in results}):
            subset = [r for r in results if r.run == run]
            run_rc = float(np.mean([r.route_completion for r in subset]))
            run_is = float(np.mean([r.infraction_score for r in subset]))
            per_run[run] = (run_rc, run_is, run_rc * run_is)
        values = np.array(list(per_run.values()))
        counts: Dict[str, int] = {kind: 0 for kind in INFRACTION_KINDS}
        for result in results:
            for kind, count in result.infractions.items():
                counts[kind] += count
        return cls(
            rc=rc,
            is_=is_,
            ds=rc * is_,
            rc_std=float(values[:, 0].std()),
            is_std=float(values[:, 1].std()),
            ds_std=float(values[:, 2].std()),
            mean_route_ds=float(np.mean([r.driving_score for r in results])),
            runs=len(per_run),
            routes=list(results),
            infraction_counts=counts,
            penalties=dict(penalties),
            policy=policy,
        )

    def to_dict(self) -> dict:
        """Return a JSON-ready summary without the per-route rows."""
        return {
            "policy": self.policy,
            "rc": self.rc,
            "is": self.is_,
            "ds": self.ds,
            "rc_std": self.rc_std,
            "is_std": self.is_std,
            "ds_std": self.ds_std,
            "mean_route_ds": self.mean_route_ds,
            "runs": self.runs,
            "routes": len({r.route for r in self.routes}),
            "infraction_counts": self.infraction_counts,
            "penalties": self.penalties,
        }

    def table(self) -> str:
        """Return the report as a text table."""
        lines = [
            f"policy: {self.policy or '-'}   runs: {self.runs}",
            f"{'metric':<16}{'mean':>10}{'std':>10}",
            f"{'DS':<16}{self.ds:>10.4f}{self.ds_std:>10.4f}",
            f"{'RC':<16}{self.rc:>10.4f}{self.rc_std:>10.4f}",
            f"{'IS':<16}{self.is_:>10.4f}{self.is_std:>10.4f}",
            f"{'mean route DS':<16}{self.mean_route_ds:>10.4f}",
            "infractions: "
            + ", ".join(f"{k}={v}" for k, v in sorted(self.infraction_counts.items())),
            "penalties: "
            + ", ".join(f"{k}={v}" for k, v in sorted(self.penalties.items())),
        ]
        return "\n".join(lines)


def run_route(
    policy: DrivingPolicy,
    scenario: Scenario,
    microworld: dict,
    penalties: Mapping[str, float],
    run: int = 0,
    seed: int = 0,
    renderer: Optional[Renderer] = None,
    log: Optional[EpisodeStepsStream] = None,
) -> RouteResult:
    """Drive one route to termination and score it."""
    episode = DrivingEpisode(
        scenario, microworld, renderer, run=run, episode_id=f"{scenario.name}-run{run}"
    )
    frame = episode.reset()
    policy.reset(episode)
    done = False
    while not done:
        command = policy.act(episode, frame)
        _, _, done = episode.step(command)
        if not done:
            frame = episode.observe()
    record = episode.record
    if log is not None:
        record.write(log)
    rc = float(record.route_completion)
    score = infraction_score((event.kind for event in record.infractions), penalties)
    return RouteResult(
        route=scenario.name,
        run=run,
        seed=seed,
        track=scenario.track,
        route_completion=rc,
        infraction_score=score,
        driving_score=rc * score,
        infractions=record.infraction_counts(),
        steps=len(record.steps),
        termination=record.termination,
    )


def run_closed_loop(
    policy: DrivingPolicy,
    scenarios: Sequence[Scenario],
    config: dict,
    runs: Optional[int] = None,
    out_dir: Optional[Path] = None,
    config_hash: Optional[str] = None,
    checkpoint_hash: Optional[str] = None,
) -> MetricsReport:
    """Evaluate `policy` on every scenario for `runs` perturbed runs.

    Run r re-draws light phases and agent start delays with seed
    `seed * 1000 + r`. With `out_dir`, episode logs and per-route metrics are
    written as record streams.
    """
    section = config["eval"]
    runs = int(section["runs"] if runs is None else runs)
    penalties = check_penalties({**DEFAULT_PENALTIES, **section["penalties"]})
    renderer = Renderer.from_config(config["microworld"])
    log = metrics = None
    if out_dir is not None:
        log = EpisodeStepsStream(Path(out_dir) / "episode_steps.jsonl")
        metrics = RouteMetricsStream(Path(out_dir) / "route_metrics.jsonl")
    results: List[RouteResult] = []
    for run in range(runs):
        seed = int(config["seed"]) * 1000 + run
        for index, scenario in enumerate(scenarios):
            perturbed = scenario.perturbed(seed + index)
            result = run_route(
                policy,
                perturbed,
                config["microworld"],
                penalties,
                run,
                seed,
                renderer,
                log,
            )
            results.append(result)
            if metrics is not None:
                metrics.write([result.to_record(config_hash, checkpoint_hash)])
            logger.debug(
                "%s run %d: RC %.3f IS %.3f DS %.3f (%s)",
                scenario.name,
                run,
                result.route_completion,
                result.infraction_score,
                result.driving_score,
                result.termination,
            )
    report = MetricsReport.from_routes(results, penalties, getattr(policy, "name", ""))
    logger.info(
        "%s over %d runs: DS %.4f RC %.4f IS %.4f",
        report.policy,
        runs,
        report.ds,
        report.rc,
        report.is_,
    )
    return report


def evaluation_scenarios(
    config: dict, count: Optional[int] = None, track: Optional[str] = None
) -> List[Scenario]:
    """Return the held-out evaluation routes.

    Their seeds live in a different range from the collection scenarios, so
    no evaluation route is ever seen in training.
    """
    section = config["eval"]
    count = int(section["routes"] if count is None else count)
    track = track or section["track"]
    base = 1_000_000 + int(config["seed"]) * 10_007
    return [
        generate_scenario(
            base + index,
            track=track,
            name=f"eval-{track}-{index:03d}",
            misleading_rate=config["microworld"]["misleading_rate"],
        )
        for index in range(count)
    ]
