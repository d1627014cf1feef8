"""WorldPlan: language-conditioned driving planner with a multi-view world model."""
