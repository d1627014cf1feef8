"""Closed-loop benchmark, generation-quality proxies and ablations."""

from worldplan.eval.ablation import ARMS, ablation_suite, apply_arm  # noqa
from worldplan.eval.agents import (  # noqa
    ConstantThrottleAgent,
    ExpertAgent,
    LearnedAgent,
    RandomWaypointAgent,
)
from worldplan.eval.closed_loop import (  # noqa
    MetricsReport,
    evaluation_scenarios,
    run_closed_loop,
)
from worldplan.eval.frechet import FeatureNets, frechet_feature_distance  # noqa
from worldplan.eval.horizon import GenQualityReport, long_horizon_study  # noqa
