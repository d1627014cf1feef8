"""Self-contained 2D driving microworld."""

from worldplan.microworld.dynamics import step_dynamics  # noqa
from worldplan.microworld.episode import DrivingEpisode, EpisodeRecord  # noqa
from worldplan.microworld.expert import expert_labels, expert_policy  # noqa
from worldplan.microworld.infractions import (  # noqa
    InfractionEvent,
    detect_infractions,
)
from worldplan.microworld.instructions import Instruction  # noqa
from worldplan.microworld.render import MultiViewFrame, Renderer, render_views  # noqa
from worldplan.microworld.scenario import Scenario, generate_scenario  # noqa
from worldplan.microworld.state import WorldState  # noqa
