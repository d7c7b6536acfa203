"""Simulated closed-loop chemistry: a planner compiles an instruction into a
state machine, rule-based agents run it against a seeded plant, and a
summarizer turns the fused datastore into a structured report."""
from .config import ConfigError, ScenarioConfig
from .simulation import RunResult, run_scenario

__all__ = ["ConfigError", "RunResult", "ScenarioConfig", "run_scenario"]
__version__ = "0.1.0"
