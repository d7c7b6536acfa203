from __future__ import annotations

import functools

import pytest

from chemloop.config import ScenarioConfig
from chemloop.planner import GrammarProfile, Inventory, compile_plan
from chemloop.simulation import run_scenario

HCL_INSTRUCTION = ScenarioConfig.load("hcl_titration").instruction
WEIGH_INSTRUCTION = ScenarioConfig.load("nacl_weighing").instruction


@functools.lru_cache(maxsize=None)
def cached_run(name: str, seed: int | None = None, faults: tuple[str, ...] = ()):
    """Closed-loop runs are the slow part of the suite, so each is computed once."""
    return run_scenario(ScenarioConfig.load(name), seed, faults)


@pytest.fixture(scope="session")
def grammar() -> GrammarProfile:
    return GrammarProfile.load()


@pytest.fixture(scope="session")
def titration_plan(grammar):
    cfg = ScenarioConfig.load("hcl_titration")
    return compile_plan(cfg.instruction, grammar, Inventory.from_config({n: {} for n in cfg.inventory}))


@pytest.fixture(scope="session")
def weighing_plan(grammar):
    cfg = ScenarioConfig.load("nacl_weighing")
    return compile_plan(cfg.instruction, grammar, Inventory.from_config({n: {} for n in cfg.inventory}))
