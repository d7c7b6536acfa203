"""Agent messages, the in-process message bus, and the task-plan schema.

Everything that crosses an agent boundary is one of the dataclasses here, and
everything that is written to disk goes through :func:`canonical_json` so that
two runs with the same seed produce byte-identical files.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .fsm import StateMachine, validate as validate_machine


class AgentId(str, Enum):
    PLANNER = "Planner"
    VISION = "VisionSupervisor"
    AUDIO = "AudioSupervisor"
    ACTION = "ActionAgent"
    STAT_LOGGER = "StatLogger"
    RECORDER = "Recorder"
    SUMMARIZER = "Summarizer"

    def __str__(self) -> str:
        return self.value


AGENT_NAMES = frozenset(a.value for a in AgentId)


class ProtocolError(Exception):
    pass


class UnknownReceiver(ProtocolError):
    pass


class UnresolvedSubtask(ProtocolError):
    pass


class MalformedDocument(ProtocolError):
    pass


class SchemaViolation(ProtocolError):
    def __init__(self, key: str, detail: str = ""):
        super().__init__(f"{key}: {detail}" if detail else key)
        self.key = key


# ---------------------------------------------------------------- canonical JSON


def _round_float(key: str, x: float) -> float:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value for {key!r}")
    if x == 0.0:
        return 0.0
    if "confidence" in key or key in ("weight", "gamma"):
        return float(f"{x:.6g}")
    if abs(x) >= 1e-3:
        return round(x, 4)
    return float(f"{x:.6g}")


def canonicalize(obj: Any, key: str = "") -> Any:
    """Round floats per the canonical rules and convert containers to JSON types.

    Confidences keep six significant digits; every other float keeps four
    decimals (quantities in mL, pH, g and seconds are all well served by
    that), falling back to six significant digits for magnitudes below 1e-3.
    """
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        return _round_float(key, obj)
    if hasattr(obj, "item") and callable(obj.item):  # numpy scalar
        return canonicalize(obj.item(), key)
    if isinstance(obj, Mapping):
        return {str(k): canonicalize(v, str(k)) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonicalize(v, key) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj: Any, indent: int | None = None) -> str:
    return json.dumps(
        canonicalize(obj),
        sort_keys=True,
        indent=indent,
        separators=(",", ":") if indent is None else (",", ": "),
        ensure_ascii=False,
    )


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class AgentMessage:
    sender: AgentId
    receiver: AgentId
    subtask: str
    q_target: str
    payload: Mapping[str, Any] | None = None
    sent_at: float = 0.0

    @property
    def kind(self) -> str | None:
        return None if self.payload is None else self.payload.get("kind")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sender": self.sender.value,
            "receiver": self.receiver.value,
            "subtask": self.subtask,
            "q_target": self.q_target,
            "payload": None if self.payload is None else dict(self.payload),
            "sent_at": self.sent_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgentMessage":
        for key in ("sender", "receiver", "subtask", "q_target", "sent_at"):
            if key not in d:
                raise SchemaViolation(key, "missing")
        try:
            sender, receiver = AgentId(d["sender"]), AgentId(d["receiver"])
        except ValueError as exc:
            raise SchemaViolation("sender/receiver", str(exc)) from None
        payload = d.get("payload")
        if payload is not None and not isinstance(payload, Mapping):
            raise SchemaViolation("payload", "must be an object or null")
        return cls(sender, receiver, str(d["subtask"]), str(d["q_target"]), payload, float(d["sent_at"]))


PAYLOAD_FIELDS: dict[str, tuple[str, ...]] = {
    "completion": ("subtask", "symbol", "success", "timestamp"),
    "anomaly": ("code", "detail", "timestamp"),
    "estimate": ("channel", "value", "unit", "confidence", "timestamp"),
    "command": ("symbol", "params"),
}


def check_payload(payload: Mapping[str, Any] | None) -> None:
    if payload is None:
        return
    kind = payload.get("kind")
    if kind not in PAYLOAD_FIELDS:
        raise SchemaViolation("payload.kind", f"unknown kind {kind!r}")
    for name in PAYLOAD_FIELDS[kind]:
        if name not in payload:
            raise SchemaViolation(f"payload.{name}", f"required for kind {kind!r}")


# ---------------------------------------------------------------- plan schema


@dataclass
class ParsedInstruction:
    objects: list[str]
    reagents: list[str]
    instruments: list[str]
    chemical_system: str
    initial_parameters: dict[str, tuple[float, str]]
    target_parameters: dict[str, tuple[float, str]]
    operation_intent: list[str]
    data_requirements: list[dict[str, str]]
    output_format: str
    operation_primitives: list[str]
    # scenario kind chosen by the grammar; not part of the JSON block
    kind: str = field(default="", compare=False)

    @property
    def required_entities(self) -> list[str]:
        return list(dict.fromkeys(self.objects + self.reagents + self.instruments))

    def to_dict(self) -> dict[str, Any]:
        return {
            "entities": {
                "objects": list(self.objects),
                "reagents": list(self.reagents),
                "instruments": list(self.instruments),
            },
            "initial_conditions": {
                "chemical_system": self.chemical_system,
                "parameters": {k: format_quantity(*v) for k, v in self.initial_parameters.items()},
            },
            "target_conditions": {
                "parameters": {k: format_quantity(*v) for k, v in self.target_parameters.items()},
            },
            "operation_intent": list(self.operation_intent),
            "data_requirements": [dict(r) for r in self.data_requirements],
            "output_format": self.output_format,
            "operation_primitives": list(self.operation_primitives),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], kind: str = "") -> "ParsedInstruction":
        ent = _need(d, "entities", "parsed_instruction")
        init = _need(d, "initial_conditions", "parsed_instruction")
        target = _need(d, "target_conditions", "parsed_instruction")
        return cls(
            objects=list(_need(ent, "objects", "entities")),
            reagents=list(_need(ent, "reagents", "entities")),
            instruments=list(_need(ent, "instruments", "entities")),
            chemical_system=str(_need(init, "chemical_system", "initial_conditions")),
            initial_parameters={
                k: parse_quantity(v) for k, v in _need(init, "parameters", "initial_conditions").items()
            },
            target_parameters={
                k: parse_quantity(v) for k, v in _need(target, "parameters", "target_conditions").items()
            },
            operation_intent=list(_need(d, "operation_intent", "parsed_instruction")),
            data_requirements=[dict(r) for r in _need(d, "data_requirements", "parsed_instruction")],
            output_format=str(_need(d, "output_format", "parsed_instruction")),
            operation_primitives=list(_need(d, "operation_primitives", "parsed_instruction")),
            kind=kind,
        )


def format_quantity(value: float, unit: str) -> str:
    text = repr(float(value)) if not float(value).is_integer() else f"{value:.1f}"
    return f"{text} {unit}".strip()


def parse_quantity(text: str) -> tuple[float, str]:
    parts = str(text).split(None, 1)
    try:
        value = float(parts[0])
    except (IndexError, ValueError):
        raise SchemaViolation("parameters", f"not a 'value unit' string: {text!r}") from None
    return value, parts[1] if len(parts) > 1 else ""


@dataclass
class EnvironmentCheck:
    satisfied: bool
    missing_objects: list[str]
    user_feedback: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "satisfied": self.satisfied,
            "missing_objects": list(self.missing_objects),
            "user_feedback": self.user_feedback,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EnvironmentCheck":
        return cls(
            bool(_need(d, "satisfied", "environment_check")),
            list(_need(d, "missing_objects", "environment_check")),
            d.get("user_feedback"),
        )


@dataclass
class Subtask:
    id: str
    receiver: AgentId
    description: str
    input_symbol: str | None = None
    resulting_state: str | None = None


@dataclass
class ExpectedTransition:
    source: str
    symbol: str
    target: str
    via: str

    def to_dict(self) -> dict[str, str]:
        return {"from": self.source, "on": self.symbol, "to": self.target, "via": self.via}


@dataclass
class StatLoggerConfig:
    activate: bool
    activation_phase: str
    activation_trigger: AgentId
    associated_subtasks: list[str] = field(default_factory=list)


@dataclass
class RecorderConfig:
    activate: bool
    data_sources: list[str]
    activation_time: str = "experiment_start"
    deactivation_time: str = "experiment_end"


@dataclass
class TaskPlan:
    parsed_instruction: ParsedInstruction
    environment_check: EnvironmentCheck
    state_machine: StateMachine
    subtasks: list[Subtask]
    dependencies: dict[str, list[str]]
    expected_transitions: list[ExpectedTransition]
    stat_logger: StatLoggerConfig
    recorder: RecorderConfig

    def subtask(self, sid: str) -> Subtask:
        for s in self.subtasks:
            if s.id == sid:
                return s
        raise UnresolvedSubtask(sid)

    def subtask_ids(self) -> set[str]:
        return {s.id for s in self.subtasks}

    def subtask_for_symbol(self, symbol: str) -> str | None:
        for s in self.subtasks:
            if s.input_symbol == symbol:
                return s.id
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "parsed_instruction": self.parsed_instruction.to_dict(),
            "environment_check": self.environment_check.to_dict(),
            "state_machine": self.state_machine.to_dict(),
            "task_decomposition": {
                "subtasks": [
                    {"id": s.id, "receiver": s.receiver.value, "description": s.description}
                    for s in self.subtasks
                ],
                "dependencies": {k: list(v) for k, v in self.dependencies.items()},
                "state_associations": {
                    s.id: {"input_symbol": s.input_symbol, "resulting_state": s.resulting_state}
                    for s in self.subtasks
                },
                "expected_transitions": [e.to_dict() for e in self.expected_transitions],
            },
            "module_instantiation": {
                "statistics_logger": {
                    "activate": self.stat_logger.activate,
                    "activation_phase": self.stat_logger.activation_phase,
                    "activation_trigger": self.stat_logger.activation_trigger.value,
                    "associated_subtasks": list(self.stat_logger.associated_subtasks),
                },
                "high_confidence_recorder": {
                    "activate": self.recorder.activate,
                    "activation_time": self.recorder.activation_time,
                    "deactivation_time": self.recorder.deactivation_time,
                    "data_sources": list(self.recorder.data_sources),
                },
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskPlan":
        for key in PLAN_BLOCKS:
            if key not in d:
                raise SchemaViolation(key, "missing plan block")
        td = d["task_decomposition"]
        assoc = td.get("state_associations", {})
        subtasks = []
        for s in _need(td, "subtasks", "task_decomposition"):
            sid = _need(s, "id", "subtasks")
            try:
                receiver = AgentId(_need(s, "receiver", "subtasks"))
            except ValueError:
                raise SchemaViolation("subtasks.receiver", f"unknown agent {s['receiver']!r}") from None
            a = assoc.get(sid, {})
            subtasks.append(
                Subtask(sid, receiver, str(s.get("description", "")), a.get("input_symbol"), a.get("resulting_state"))
            )
        mi = d["module_instantiation"]
        sl = _need(mi, "statistics_logger", "module_instantiation")
        rc = _need(mi, "high_confidence_recorder", "module_instantiation")
        try:
            trigger = AgentId(_need(sl, "activation_trigger", "statistics_logger"))
        except ValueError:
            raise SchemaViolation("statistics_logger.activation_trigger", "unknown agent") from None
        sm = d["state_machine"]
        for key in ("states", "input_symbols", "initial_state", "accepting_states", "transitions"):
            _need(sm, key, "state_machine")
        parsed = ParsedInstruction.from_dict(d["parsed_instruction"])
        parsed.kind = infer_kind(parsed)
        return cls(
            parsed_instruction=parsed,
            environment_check=EnvironmentCheck.from_dict(d["environment_check"]),
            state_machine=StateMachine.from_dict(sm),
            subtasks=subtasks,
            dependencies={k: list(v) for k, v in td.get("dependencies", {}).items()},
            expected_transitions=[
                ExpectedTransition(e["from"], e["on"], e["to"], e["via"])
                for e in td.get("expected_transitions", [])
            ],
            stat_logger=StatLoggerConfig(
                bool(_need(sl, "activate", "statistics_logger")),
                str(_need(sl, "activation_phase", "statistics_logger")),
                trigger,
                list(sl.get("associated_subtasks", [])),
            ),
            recorder=RecorderConfig(
                bool(_need(rc, "activate", "high_confidence_recorder")),
                list(_need(rc, "data_sources", "high_confidence_recorder")),
                str(rc.get("activation_time", "experiment_start")),
                str(rc.get("deactivation_time", "experiment_end")),
            ),
        )


def infer_kind(parsed: ParsedInstruction) -> str:
    """Recover the scenario kind from the target conditions of a decoded plan."""
    targets = parsed.target_parameters
    if "mass" in targets:
        return "weigh_and_dissolve"
    if "color" in targets:
        return "titrate_to_color"
    if "pH" in targets:
        return "titrate_to_ph"
    return ""


PLAN_BLOCKS = (
    "parsed_instruction",
    "environment_check",
    "state_machine",
    "task_decomposition",
    "module_instantiation",
)


def _need(d: Mapping[str, Any], key: str, where: str) -> Any:
    if not isinstance(d, Mapping):
        raise SchemaViolation(where, "expected an object")
    if key not in d:
        raise SchemaViolation(key, f"missing from {where}")
    return d[key]


def _find_cycle(graph: Mapping[str, list[str]]) -> list[str] | None:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = 1
        stack.append(node)
        for nxt in graph.get(node, []):
            if color.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if color.get(nxt) is None:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for node in sorted(graph):
        if color.get(node) is None:
            found = visit(node)
            if found:
                return found
    return None


def validate_plan(plan: TaskPlan) -> list[str]:
    """Cross-reference checks over a plan; an empty list means it is coherent."""
    problems = list(validate_machine(plan.state_machine))
    machine = plan.state_machine
    ids = plan.subtask_ids()
    if len(ids) != len(plan.subtasks):
        problems.append("duplicate subtask ids")
    for s in plan.subtasks:
        if s.resulting_state is not None and s.resulting_state not in machine.states:
            problems.append(f"subtask {s.id}: resulting_state {s.resulting_state!r} not in states")
        if s.input_symbol is not None and s.input_symbol not in machine.symbols:
            problems.append(f"subtask {s.id}: input_symbol {s.input_symbol!r} not in input symbols")
        if s.input_symbol is not None and s.resulting_state is not None:
            targets = {dst for (_, sym), dst in machine.transitions.items() if sym == s.input_symbol}
            if s.resulting_state not in targets:
                problems.append(
                    f"subtask {s.id}: no transition on {s.input_symbol!r} reaches {s.resulting_state!r}"
                )
    for sid, deps in plan.dependencies.items():
        for ref in [sid, *deps]:
            if ref not in ids:
                problems.append(f"dependency references unknown subtask {ref!r}")
    cycle = _find_cycle(plan.dependencies)
    if cycle:
        problems.append("dependency cycle: " + " -> ".join(cycle))
    for e in plan.expected_transitions:
        if machine.target(e.source, e.symbol) != e.target:
            problems.append(f"expected transition {e.source} --{e.symbol}--> {e.target} not in machine")
        if e.via not in ids:
            problems.append(f"expected transition via unknown subtask {e.via!r}")
    sl = plan.stat_logger
    if sl.activate and sl.activation_phase not in machine.states:
        problems.append(f"statistics logger activation_phase {sl.activation_phase!r} not in states")
    for ref in sl.associated_subtasks:
        if ref not in ids:
            problems.append(f"statistics logger references unknown subtask {ref!r}")
    return problems


# ---------------------------------------------------------------- encode / decode


def encode(obj: AgentMessage | TaskPlan) -> bytes:
    return canonical_json(obj.to_dict()).encode("utf-8")


def decode(data: bytes | str) -> AgentMessage | TaskPlan:
    """Parse canonical bytes back into a message or a plan.

    The document type is recognised by its keys: plans carry the five plan
    blocks, messages carry ``sender``.
    """
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(str(exc)) from None
    if not isinstance(doc, dict):
        raise MalformedDocument("top-level JSON value must be an object")
    if "sender" in doc:
        return AgentMessage.from_dict(doc)
    if any(k in doc for k in PLAN_BLOCKS):
        return TaskPlan.from_dict(doc)
    raise SchemaViolation("parsed_instruction", "document is neither a message nor a plan")


# ---------------------------------------------------------------- bus


class MessageBus:
    """Per-receiver FIFO queues with a global sequence counter.

    When a plan is attached, every send is checked against it: the subtask
    must exist and ``q_target`` must be a declared state.
    """

    def __init__(self, plan: TaskPlan | None = None):
        self.plan = plan
        self._queues: dict[AgentId, deque[tuple[int, AgentMessage]]] = defaultdict(deque)
        self._seq = 0
        self.log: list[tuple[int, AgentMessage]] = []
        self.keep_log = True

    def send(self, msg: AgentMessage) -> int:
        try:
            AgentId(msg.receiver)
        except ValueError:
            raise UnknownReceiver(str(msg.receiver)) from None
        if self.plan is not None:
            if msg.subtask not in self.plan.subtask_ids():
                raise UnresolvedSubtask(msg.subtask)
            if msg.q_target not in self.plan.state_machine.states:
                raise SchemaViolation("q_target", f"{msg.q_target!r} is not a declared state")
        self._seq += 1
        self._queues[msg.receiver].append((self._seq, msg))
        if self.keep_log:
            self.log.append((self._seq, msg))
        return self._seq

    @property
    def seq(self) -> int:
        return self._seq

    def poll(self, receiver: AgentId) -> list[AgentMessage]:
        q = self._queues.get(receiver)
        if not q:
            return []
        out = [m for _, m in q]
        q.clear()
        return out

    def pending(self, receiver: AgentId) -> int:
        return len(self._queues.get(receiver, ()))
