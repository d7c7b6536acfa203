from __future__ import annotations

import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chemloop.protocol import (
    AgentId,
    AgentMessage,
    MalformedDocument,
    MessageBus,
    SchemaViolation,
    UnresolvedSubtask,
    canonical_json,
    decode,
    encode,
    validate_plan,
)


def msg(sender=AgentId.PLANNER, receiver=AgentId.ACTION, subtask="t5", q="q1_grasped", payload=None, t=0.0):
    return AgentMessage(sender, receiver, subtask, q, payload, t)


def test_send_returns_sequence_number(titration_plan):
    bus = MessageBus(titration_plan)
    m = msg(payload={"kind": "command", "symbol": "sigma_grasp", "params": {}})
    assert bus.send(m) == 1
    assert bus.poll(AgentId.ACTION) == [m]
    assert bus.poll(AgentId.ACTION) == []


def test_unresolved_subtask(titration_plan):
    with pytest.raises(UnresolvedSubtask):
        MessageBus(titration_plan).send(msg(subtask="t99"))


def test_undeclared_state_rejected(titration_plan):
    with pytest.raises(SchemaViolation):
        MessageBus(titration_plan).send(msg(q="q9_nowhere"))


def test_fifo_per_receiver():
    bus = MessageBus()
    a, b = msg(t=1.0), msg(t=2.0)
    bus.send(a)
    bus.send(b)
    assert bus.poll(AgentId.ACTION) == [a, b]


def test_interleaved_senders_follow_global_sequence():
    bus = MessageBus()
    sent = []
    for i, sender in enumerate([AgentId.PLANNER, AgentId.VISION, AgentId.AUDIO, AgentId.VISION, AgentId.PLANNER]):
        m = msg(sender=sender, t=float(i))
        sent.append((bus.send(m), m))
    assert bus.poll(AgentId.ACTION) == [m for _, m in sorted(sent, key=lambda p: p[0])]


def test_titration_plan_validates(titration_plan):
    assert validate_plan(titration_plan) == []
    assert [s.id for s in titration_plan.subtasks] == [f"t{i}" for i in range(1, 8)]


def _independent_cycle(graph):
    """Kahn's algorithm: a cycle exists iff not every node can be removed."""
    nodes = set(graph) | {d for deps in graph.values() for d in deps}
    indeg = {n: 0 for n in nodes}
    for n, deps in graph.items():
        indeg[n] += len(deps)
    ready = [n for n, k in indeg.items() if k == 0]
    removed = 0
    while ready:
        r = ready.pop()
        removed += 1
        for n, deps in graph.items():
            if r in deps:
                indeg[n] -= 1
                if indeg[n] == 0:
                    ready.append(n)
    return removed != len(nodes)


def test_plan_dependencies_acyclic_by_independent_oracle(titration_plan, weighing_plan):
    for plan in (titration_plan, weighing_plan):
        assert not _independent_cycle(plan.dependencies)
        ids = {s.id for s in plan.subtasks}
        assert all(d in ids for deps in plan.dependencies.values() for d in deps)


def test_dependency_cycle_reported(titration_plan):
    deps = dict(titration_plan.dependencies)
    deps["t1"] = ["t2"]
    deps["t2"] = ["t1"]
    problems = validate_plan(replace(titration_plan, dependencies=deps))
    assert any("cycle" in p for p in problems)


def test_undeclared_resulting_state_reported(titration_plan):
    subtasks = list(titration_plan.subtasks)
    subtasks[4] = replace(subtasks[4], resulting_state="q9_nowhere")
    problems = validate_plan(replace(titration_plan, subtasks=subtasks))
    assert any("q9_nowhere" in p for p in problems)


def test_plan_round_trip(titration_plan, weighing_plan):
    for plan in (titration_plan, weighing_plan):
        back = decode(encode(plan))
        assert back == plan
        assert encode(back) == encode(plan)


def test_missing_state_machine_block(titration_plan):
    doc = json.loads(encode(titration_plan))
    del doc["state_machine"]
    with pytest.raises(SchemaViolation) as err:
        decode(json.dumps(doc))
    assert "state_machine" in str(err.value)


def test_template_document_decodes(titration_plan):
    # five-block document written by hand in the template layout
    doc = {
        "parsed_instruction": {
            "entities": {"objects": ["beaker"], "reagents": ["HCl", "NaOH"], "instruments": ["pH meter"]},
            "initial_conditions": {"chemical_system": "HCl with NaOH",
                                   "parameters": {"pH": "1.06 pH", "concentration": "0.1 M"}},
            "target_conditions": {"parameters": {"pH": "12.5 pH"}},
            "operation_intent": ["titrate"],
            "data_requirements": [{"quantity": "pH", "frequency": "per_drop"}],
            "output_format": "json",
            "operation_primitives": ["grasp", "titrate"],
        },
        "environment_check": {"satisfied": True, "missing_objects": [], "user_feedback": None},
        "state_machine": titration_plan.state_machine.to_dict(),
        "task_decomposition": {
            "subtasks": [{"id": "t1", "receiver": "VisionSupervisor", "description": "monitor"},
                         {"id": "t5", "receiver": "ActionAgent", "description": "grasp"}],
            "dependencies": {"t5": ["t1"]},
            "state_associations": {"t5": {"input_symbol": "sigma_grasp", "resulting_state": "q1_grasped"}},
        },
        "module_instantiation": {
            "statistics_logger": {"activate": True, "activation_phase": "q3_ready",
                                  "activation_trigger": "VisionSupervisor", "associated_subtasks": ["t5"]},
            "high_confidence_recorder": {"activate": True, "data_sources": ["audio_estimates"]},
        },
    }
    plan = decode(json.dumps(doc))
    assert plan.parsed_instruction.target_parameters == {"pH": (12.5, "pH")}
    assert plan.parsed_instruction.kind == "titrate_to_ph"
    assert validate_plan(plan) == []


def test_malformed_document():
    with pytest.raises(MalformedDocument):
        decode(b"{not json")


_values = st.integers(-10**6, 10**6).map(lambda i: i / 100)
_payloads = st.one_of(
    st.none(),
    st.fixed_dictionaries({"kind": st.just("estimate"), "channel": st.sampled_from(["audio", "stat"]),
                           "value": _values, "unit": st.just("mL"), "timestamp": _values}),
    st.fixed_dictionaries({"kind": st.just("completion"), "subtask": st.sampled_from(["t5", "t6"]),
                           "symbol": st.text(min_size=1, max_size=12), "success": st.booleans(),
                           "timestamp": _values}),
)
_messages = st.builds(AgentMessage, st.sampled_from(list(AgentId)), st.sampled_from(list(AgentId)),
                      st.sampled_from(["t1", "t5", "t6"]), st.sampled_from(["q0_initial", "q4_titrating"]),
                      _payloads, _values)


@settings(max_examples=300, deadline=None)
@given(_messages)
def test_message_round_trip(m):
    assert decode(encode(m)) == m


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(AgentId)), st.sampled_from(list(AgentId))), max_size=40))
def test_bus_fifo_and_determinism(schedule):
    def run():
        bus = MessageBus()
        delivered = {}
        for i, (s, r) in enumerate(schedule):
            bus.send(msg(sender=s, receiver=r, t=float(i)))
        for r in AgentId:
            delivered[r] = bus.poll(r)
        return delivered

    a, b = run(), run()
    assert canonical_json({k.value: [m.to_dict() for m in v] for k, v in a.items()}) == \
        canonical_json({k.value: [m.to_dict() for m in v] for k, v in b.items()})
    for r, got in a.items():
        for s in AgentId:
            times = [m.sent_at for m in got if m.sender == s]
            assert times == sorted(times)
