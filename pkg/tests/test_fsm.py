from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chemloop.fsm import (
    MachineCursor,
    StateMachine,
    UndefinedTransition,
    UnknownSymbol,
    is_accepting,
    reachable,
    replay,
    step,
    validate,
)
from chemloop.planner import TITRATION_EDGES, TITRATION_STATES, TITRATION_SYMBOLS


@pytest.fixture
def titration() -> StateMachine:
    return StateMachine.build(TITRATION_STATES, TITRATION_SYMBOLS, TITRATION_EDGES, "q0_initial", ["q_accept"])


def test_grasp_from_initial(titration):
    cursor = MachineCursor(titration)
    assert step(cursor, "sigma_grasp", 1.0, "VisionSupervisor") == "q1_grasped"
    assert cursor.history[-1].to_dict() == {
        "from": "q0_initial", "symbol": "sigma_grasp", "to": "q1_grasped", "timestamp": 1.0,
        "emitter": "VisionSupervisor",
    }


def test_undefined_transition(titration):
    cursor = MachineCursor(titration, "q1_grasped")
    with pytest.raises(UndefinedTransition):
        cursor.step("sigma_grasp")
    assert cursor.current == "q1_grasped"
    assert cursor.history == []


def test_unknown_symbol(titration):
    with pytest.raises(UnknownSymbol):
        MachineCursor(titration).step("sigma_teleport")


def _shortest_path(machine: StateMachine, goal: str) -> list[str]:
    """Brute-force enumeration of symbol words by increasing length."""
    symbols = machine.ordered_symbols()
    for n in range(1, 8):
        for word in itertools.product(symbols, repeat=n):
            try:
                if replay(machine, word) == goal:
                    return list(word)
            except UndefinedTransition:
                continue
    raise AssertionError("no path")


def test_main_path_reaches_accept(titration):
    # The baseline reading (sigma_record at q2) sits between draw and titrate.
    path = _shortest_path(titration, "q_accept")
    assert path == ["sigma_grasp", "sigma_draw", "sigma_record", "sigma_titrate", "sigma_endpoint", "sigma_verify"]
    cursor = MachineCursor(titration)
    for i, sym in enumerate(path):
        cursor.step(sym, float(i))
    assert cursor.accepting


def test_accepting_predicates(titration):
    assert is_accepting(MachineCursor(titration, "q_accept"))
    assert not is_accepting(MachineCursor(titration))
    degenerate = StateMachine.build(["a"], ["x"], [], "a", ["a"])
    assert is_accepting(MachineCursor(degenerate))


def test_validate_titration_machine(titration):
    assert validate(titration) == []
    assert reachable(titration) == set(TITRATION_STATES)


def test_validate_unreachable_accepting():
    m = StateMachine.build(["a", "b", "c"], ["x"], [("a", "x", "b")], "a", ["c"])
    problems = validate(m)
    assert len(problems) == 1 and "unreachable" in problems[0]


def test_validate_dangling_target():
    m = StateMachine.build(["a", "b"], ["x"], [("a", "x", "b"), ("b", "x", "zz")], "a", ["b"])
    problems = validate(m)
    assert len(problems) == 1 and "dangling" in problems[0]


def test_nondeterministic_build_rejected():
    with pytest.raises(ValueError):
        StateMachine.build(["a", "b"], ["x"], [("a", "x", "a"), ("a", "x", "b")], "a", ["b"])


def test_timestamps_must_not_regress(titration):
    cursor = MachineCursor(titration)
    cursor.step("sigma_grasp", 5.0)
    with pytest.raises(ValueError):
        cursor.step("sigma_draw", 4.0)


def test_dict_round_trip(titration):
    assert StateMachine.from_dict(titration.to_dict()) == titration


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(TITRATION_SYMBOLS), st.floats(0, 5)), max_size=60))
def test_replay_closure_and_monotone_history(events):
    machine = StateMachine.build(TITRATION_STATES, TITRATION_SYMBOLS, TITRATION_EDGES, "q0_initial", ["q_accept"])
    cursor = MachineCursor(machine)
    t = 0.0
    for sym, dt in events:
        t += dt
        try:
            cursor.step(sym, t)
        except UndefinedTransition:
            pass
        assert cursor.current in machine.states
    assert replay(machine, [h.symbol for h in cursor.history]) == cursor.current
    times = [h.timestamp for h in cursor.history]
    assert times == sorted(times)
    for h in cursor.history:
        assert machine.target(h.source, h.symbol) == h.target
