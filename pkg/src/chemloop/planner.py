"""Rule-based planner: instruction text to a validated task plan.

Parsing is template matching against a :class:`GrammarProfile`; the scenario
kind picked by the grammar fixes the state-machine skeleton, and the captured
slot values fill in the parameters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .fsm import StateMachine, validate as validate_machine
from .protocol import (
    AgentId,
    EnvironmentCheck,
    ExpectedTransition,
    ParsedInstruction,
    RecorderConfig,
    StatLoggerConfig,
    Subtask,
    TaskPlan,
    validate_plan,
)


class PlannerError(Exception):
    pass


class UnrecognizedInstruction(PlannerError):
    pass


class MissingParameter(PlannerError):
    def __init__(self, slot: str):
        super().__init__(f"instruction is missing the required parameter {slot!r}")
        self.slot = slot


class UnsupportedScenario(PlannerError):
    pass


class InvalidPlan(PlannerError):
    pass


_NUM = r"[-+]?\d+(?:\.\d+)?"
SLOT_TYPES = {
    "number": (rf"({_NUM})", ""),
    "conc": (rf"({_NUM})\s*(?:m|mol/l)\b", "M"),
    "mass": (rf"({_NUM})\s*g\b", "g"),
    "volume": (rf"({_NUM})\s*ml\b", "mL"),
    "name": (r"([a-z][a-z0-9\-]*(?: [a-z0-9\-]+){0,3}?)", ""),
}
_SLOT = re.compile(r"\{(\w+):(\w+)\}")


@dataclass(frozen=True)
class SlotPattern:
    regex: re.Pattern
    slots: tuple[tuple[str, str], ...]

    @classmethod
    def compile(cls, template: str) -> "SlotPattern":
        slots = tuple((m.group(1), m.group(2)) for m in _SLOT.finditer(template))
        for _, typ in slots:
            if typ not in SLOT_TYPES:
                raise ValueError(f"unknown slot type {typ!r} in {template!r}")
        pattern = _SLOT.sub(lambda m: SLOT_TYPES[m.group(2)][0], template)
        return cls(re.compile(pattern), slots)


@dataclass(frozen=True)
class Profile:
    kind: str
    keywords: tuple[str, ...]
    exclude: tuple[str, ...]
    patterns: tuple[SlotPattern, ...]
    required: tuple[str, ...]
    intent: tuple[str, ...]
    intent_keywords: tuple[tuple[str, str], ...]
    primitives: tuple[str, ...]
    data_rules: tuple[tuple[str, tuple[dict, ...]], ...]

    def matches(self, text: str) -> bool:
        return all(k in text for k in self.keywords) and not any(x in text for x in self.exclude)


@dataclass(frozen=True)
class GrammarProfile:
    profiles: tuple[Profile, ...]
    reagent_aliases: tuple[tuple[str, str], ...]
    objects: tuple[str, ...]
    instruments: tuple[str, ...]
    primitives: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "GrammarProfile":
        profiles = []
        for p in doc["profiles"]:
            profiles.append(
                Profile(
                    kind=p["kind"],
                    keywords=tuple(k.lower() for k in p.get("keywords", [])),
                    exclude=tuple(k.lower() for k in p.get("exclude", [])),
                    patterns=tuple(SlotPattern.compile(s.lower()) for s in p.get("slots", [])),
                    required=tuple(p.get("required", [])),
                    intent=tuple(p.get("intent", [])),
                    intent_keywords=tuple((k.lower(), v) for k, v in p.get("intent_keywords", {}).items()),
                    primitives=tuple(p.get("primitives", [])),
                    data_rules=tuple(
                        (r["when"].lower(), tuple(dict(x) for x in r["add"])) for r in p.get("data_rules", [])
                    ),
                )
            )
        # longest alias first so "calcium chloride" wins over "calcium"
        aliases = sorted(
            ((k.lower(), v) for k, v in doc.get("reagent_aliases", {}).items()), key=lambda kv: -len(kv[0])
        )
        lex = doc.get("lexicon", {})
        grammar = cls(
            tuple(profiles),
            tuple(aliases),
            tuple(lex.get("objects", [])),
            tuple(lex.get("instruments", [])),
            frozenset(doc.get("primitives", [])),
        )
        for p in grammar.profiles:
            bad = set(p.primitives) - grammar.primitives
            if grammar.primitives and bad:
                raise ValueError(f"profile {p.kind!r} uses unknown primitives {sorted(bad)}")
        return grammar

    @classmethod
    def load(cls, path: str | Path | None = None) -> "GrammarProfile":
        if path is None:
            text = resources.files("chemloop.scenarios").joinpath("grammar.yaml").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_mapping(yaml.safe_load(text))

    def canonical_reagent(self, phrase: str) -> str:
        phrase = phrase.strip().lower()
        for alias, name in self.reagent_aliases:
            if alias == phrase:
                return name
        for alias, name in self.reagent_aliases:
            if re.search(rf"\b{re.escape(alias)}\b", phrase):
                return name
        return phrase


@dataclass
class Inventory:
    """Items on the bench: name mapped to (quantity, location)."""

    items: dict[str, tuple[float, str]] = field(default_factory=dict)

    @classmethod
    def from_config(cls, entries: Iterable[Mapping[str, Any]] | Mapping[str, Any]) -> "Inventory":
        items: dict[str, tuple[float, str]] = {}
        if isinstance(entries, Mapping):
            entries = [{"name": k, **(v or {})} for k, v in entries.items()]
        for e in entries:
            name = str(e["name"])
            if name in items:
                raise ValueError(f"duplicate inventory item {name!r}")
            items[name] = (float(e.get("quantity", 1)), str(e.get("location", "")))
        return cls(items)

    def names(self) -> set[str]:
        return set(self.items)


# ---------------------------------------------------------------- parsing


def _normalise(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def parse_instruction(text: str, grammar: GrammarProfile) -> ParsedInstruction:
    """Match ``text`` against the grammar and fill the five plan blocks.

    Raises
    ------
    UnrecognizedInstruction
        No profile matches, or more than one does.
    MissingParameter
        A profile matches but one of its required slots is absent.
    """
    norm = _normalise(text)
    hits = [p for p in grammar.profiles if p.matches(norm)]
    if not hits:
        raise UnrecognizedInstruction(f"instruction not recognised: {text!r}")
    if len(hits) > 1:
        kinds = ", ".join(p.kind for p in hits)
        raise UnrecognizedInstruction(f"instruction is ambiguous between {kinds}: {text!r}")
    profile = hits[0]

    values: dict[str, tuple[Any, str]] = {}
    for pat in profile.patterns:
        m = pat.regex.search(norm)
        if not m:
            continue
        for i, (name, typ) in enumerate(pat.slots, start=1):
            raw = m.group(i)
            if typ == "name":
                values[name] = (raw.strip(), "")
            else:
                values[name] = (float(raw), SLOT_TYPES[typ][1])
    for slot in profile.required:
        if slot not in values:
            raise MissingParameter(slot)

    builder = _BUILDERS[profile.kind]
    return builder(norm, profile, grammar, values)


def _lexicon_hits(norm: str, names: Iterable[str]) -> list[str]:
    return [n for n in names if n.lower() in norm]


def _common(norm: str, profile: Profile, grammar: GrammarProfile) -> dict[str, Any]:
    intent = list(profile.intent)
    for key, text in profile.intent_keywords:
        if key in norm:
            intent.append(text)
    reqs: list[dict[str, str]] = []
    for when, adds in profile.data_rules:
        if when in norm:
            for r in adds:
                if r not in reqs:
                    reqs.append(dict(r))
    return {
        "objects": _lexicon_hits(norm, grammar.objects),
        "instruments": _lexicon_hits(norm, grammar.instruments),
        "operation_intent": intent,
        "data_requirements": reqs,
        "operation_primitives": list(profile.primitives),
    }


def _output_format(norm: str, charts: bool) -> str:
    parts = []
    if "report" in norm:
        parts.append("structured report (JSON and Markdown)")
    if charts:
        parts.append("chart data: titration curve, first derivative, second derivative, transition zoom")
    return "; ".join(parts) or "structured report (JSON and Markdown)"


def _build_ph(norm, profile, grammar, v) -> ParsedInstruction:
    c = _common(norm, profile, grammar)
    analyte = grammar.canonical_reagent(v["analyte"][0])
    titrant = grammar.canonical_reagent(v["titrant"][0])
    initial = {"concentration": (v["analyte_conc"][0], "M"), "titrant_concentration": (v["titrant_conc"][0], "M")}
    if "initial_ph" in v:
        initial["pH"] = (v["initial_ph"][0], "pH")
    return ParsedInstruction(
        objects=c["objects"],
        reagents=[analyte, titrant],
        instruments=c["instruments"],
        chemical_system=f"{analyte} ({v['analyte_conc'][0]:g} M) titrated with {titrant} ({v['titrant_conc'][0]:g} M)",
        initial_parameters=initial,
        target_parameters={"pH": (v["target_ph"][0], "pH")},
        operation_intent=c["operation_intent"],
        data_requirements=c["data_requirements"],
        output_format=_output_format(norm, charts="figure" in norm or "chart" in norm),
        operation_primitives=c["operation_primitives"],
        kind=profile.kind,
    )


def _build_color(norm, profile, grammar, v) -> ParsedInstruction:
    c = _common(norm, profile, grammar)
    analyte = grammar.canonical_reagent(v["analyte"][0])
    titrant = grammar.canonical_reagent(v["titrant"][0])
    reagents = [analyte, titrant]
    for alias, name in grammar.reagent_aliases:
        if "indicator" in norm and alias in norm and name not in reagents and "acid" in alias:
            reagents.append(name)
    from_color = v.get("from_color", ("", ""))[0]
    to_color = v["to_color"][0]
    return ParsedInstruction(
        objects=c["objects"],
        reagents=reagents,
        instruments=c["instruments"],
        chemical_system=(
            f"{analyte} ({v['analyte_volume'][0]:g} mL, {v['analyte_conc'][0]:g} M) titrated with "
            f"{titrant} ({v['titrant_conc'][0]:g} M); indicator {from_color} to {to_color}"
        ),
        initial_parameters={
            "concentration": (v["analyte_conc"][0], "M"),
            "volume": (v["analyte_volume"][0], "mL"),
            "titrant_concentration": (v["titrant_conc"][0], "M"),
        },
        # color code 1 is the free-indicator color named in the instruction
        target_parameters={"color": (1.0, "code")},
        operation_intent=c["operation_intent"] + [f"stop when the color turns {to_color}"],
        data_requirements=c["data_requirements"],
        output_format=_output_format(norm, charts=False),
        operation_primitives=c["operation_primitives"],
        kind=profile.kind,
    )


def _build_weigh(norm, profile, grammar, v) -> ParsedInstruction:
    c = _common(norm, profile, grammar)
    solid = grammar.canonical_reagent(v["solid"][0])
    return ParsedInstruction(
        objects=c["objects"],
        reagents=[solid, "deionized water"],
        instruments=c["instruments"],
        chemical_system=f"{solid} solid dissolved in {v['water_volume'][0]:g} mL deionized water",
        initial_parameters={"water_volume": (v["water_volume"][0], "mL")},
        target_parameters={"mass": (v["target_mass"][0], "g")},
        operation_intent=c["operation_intent"],
        data_requirements=c["data_requirements"],
        output_format=_output_format(norm, charts=False),
        operation_primitives=c["operation_primitives"],
        kind=profile.kind,
    )


_BUILDERS = {
    "titrate_to_ph": _build_ph,
    "titrate_to_color": _build_color,
    "weigh_and_dissolve": _build_weigh,
}


# ---------------------------------------------------------------- environment


def check_environment(parsed: ParsedInstruction, inventory: Inventory) -> EnvironmentCheck:
    present = inventory.names()
    required = parsed.required_entities
    missing = [name for name in required if name not in present]
    if not missing:
        return EnvironmentCheck(True, [], None)
    feedback = (
        f"The experiment you wish to complete is {parsed.chemical_system}. "
        f"The required instruments and reagents are {', '.join(parsed.instruments + parsed.objects)} "
        f"and {', '.join(parsed.reagents)}. "
        f"The current experimental scene lacks {', '.join(missing)}."
    )
    return EnvironmentCheck(False, missing, feedback)


# ---------------------------------------------------------------- state machines

TITRATION_STATES = (
    "q0_initial",
    "q1_grasped",
    "q2_drawn",
    "q3_ready",
    "q4_titrating",
    "q5_waiting_stable",
    "q6_complete",
    "q_accept",
)
TITRATION_SYMBOLS = (
    "sigma_grasp",
    "sigma_draw",
    "sigma_titrate",
    "sigma_audio_detect",
    "sigma_stable",
    "sigma_record",
    "sigma_endpoint",
    "sigma_verify",
)
TITRATION_EDGES = (
    ("q0_initial", "sigma_grasp", "q1_grasped"),
    ("q1_grasped", "sigma_draw", "q2_drawn"),
    ("q2_drawn", "sigma_record", "q3_ready"),
    ("q3_ready", "sigma_titrate", "q4_titrating"),
    ("q4_titrating", "sigma_titrate", "q4_titrating"),
    ("q4_titrating", "sigma_audio_detect", "q5_waiting_stable"),
    ("q5_waiting_stable", "sigma_stable", "q4_titrating"),
    ("q4_titrating", "sigma_record", "q4_titrating"),
    ("q4_titrating", "sigma_endpoint", "q6_complete"),
    ("q6_complete", "sigma_verify", "q_accept"),
)

WEIGHING_STATES = (
    "q0_initial",
    "q1_grasped",
    "q2_positioned",
    "q3_ready",
    "q4_weighing",
    "q5_weighed",
    "q6_transferred",
    "q7_dissolving",
    "q_accept",
)
WEIGHING_SYMBOLS = (
    "sigma_grasp",
    "sigma_position",
    "sigma_tare",
    "sigma_pour",
    "sigma_target_mass",
    "sigma_transfer",
    "sigma_stir",
    "sigma_dissolved",
)
WEIGHING_EDGES = (
    ("q0_initial", "sigma_grasp", "q1_grasped"),
    ("q1_grasped", "sigma_position", "q2_positioned"),
    ("q2_positioned", "sigma_tare", "q3_ready"),
    ("q3_ready", "sigma_pour", "q4_weighing"),
    ("q4_weighing", "sigma_pour", "q4_weighing"),
    ("q4_weighing", "sigma_target_mass", "q5_weighed"),
    ("q5_weighed", "sigma_transfer", "q6_transferred"),
    ("q6_transferred", "sigma_stir", "q7_dissolving"),
    ("q7_dissolving", "sigma_dissolved", "q_accept"),
)


def build_state_machine(parsed: ParsedInstruction) -> StateMachine:
    if parsed.kind in ("titrate_to_ph", "titrate_to_color"):
        machine = StateMachine.build(TITRATION_STATES, TITRATION_SYMBOLS, TITRATION_EDGES, "q0_initial", ["q_accept"])
    elif parsed.kind == "weigh_and_dissolve":
        machine = StateMachine.build(WEIGHING_STATES, WEIGHING_SYMBOLS, WEIGHING_EDGES, "q0_initial", ["q_accept"])
    else:
        raise UnsupportedScenario(parsed.kind or "<unknown>")
    problems = validate_machine(machine)
    if problems:
        raise InvalidPlan("; ".join(problems))
    return machine


# ---------------------------------------------------------------- decomposition

V, A, ACT, SUM = AgentId.VISION, AgentId.AUDIO, AgentId.ACTION, AgentId.SUMMARIZER


def _titration_tasks(parsed: ParsedInstruction) -> tuple[list[Subtask], dict, list[ExpectedTransition]]:
    quantity = "indicator color" if parsed.kind == "titrate_to_color" else "pH"
    subtasks = [
        Subtask("t1", V, "monitor the bench, the pipette and the sensor readings", None, None),
        Subtask("t2", V, f"record {quantity} and total titrant volume after each drop", "sigma_record", "q4_titrating"),
        Subtask("t3", V, "drive the state machine and detect the titration endpoint", "sigma_endpoint", "q6_complete"),
        Subtask("t4", V, "activate the statistics-based quantity logger", "sigma_titrate", "q4_titrating"),
        Subtask("t5", ACT, "grasp the rubber-headed pipette and draw titrant", "sigma_grasp", "q1_grasped"),
        Subtask("t6", A, "detect and validate droplet sounds", "sigma_audio_detect", "q5_waiting_stable"),
        Subtask("t7", SUM, "verify completion and generate the report", "sigma_verify", "q_accept"),
    ]
    deps = {"t2": ["t1"], "t3": ["t1"], "t4": ["t3"], "t5": ["t1"], "t6": ["t4"], "t7": ["t2", "t3", "t5", "t6"]}
    expected = [
        ExpectedTransition("q0_initial", "sigma_grasp", "q1_grasped", "t5"),
        ExpectedTransition("q1_grasped", "sigma_draw", "q2_drawn", "t5"),
        ExpectedTransition("q2_drawn", "sigma_record", "q3_ready", "t2"),
        ExpectedTransition("q3_ready", "sigma_titrate", "q4_titrating", "t4"),
        ExpectedTransition("q4_titrating", "sigma_audio_detect", "q5_waiting_stable", "t6"),
        ExpectedTransition("q5_waiting_stable", "sigma_stable", "q4_titrating", "t1"),
        ExpectedTransition("q4_titrating", "sigma_record", "q4_titrating", "t2"),
        ExpectedTransition("q4_titrating", "sigma_endpoint", "q6_complete", "t3"),
        ExpectedTransition("q6_complete", "sigma_verify", "q_accept", "t7"),
    ]
    return subtasks, deps, expected


def _weighing_tasks(parsed: ParsedInstruction) -> tuple[list[Subtask], dict, list[ExpectedTransition]]:
    subtasks = [
        Subtask("t1", V, "monitor the bench, the balance and the weighing boat", None, None),
        Subtask("t2", V, "read the balance and tare the weighing boat", "sigma_tare", "q3_ready"),
        Subtask("t3", V, "drive the state machine and detect the target mass", "sigma_target_mass", "q5_weighed"),
        Subtask("t4", V, "activate the statistics-based quantity logger in mass mode", "sigma_pour", "q4_weighing"),
        Subtask("t5", ACT, "grasp the spatula, position, transfer and stir", "sigma_grasp", "q1_grasped"),
        Subtask("t6", V, "confirm that the solid is completely dissolved", "sigma_dissolved", "q_accept"),
        Subtask("t7", SUM, "generate the report", None, None),
    ]
    deps = {"t2": ["t1"], "t3": ["t1"], "t4": ["t2"], "t5": ["t1"], "t6": ["t3", "t5"], "t7": ["t6"]}
    expected = [
        ExpectedTransition("q0_initial", "sigma_grasp", "q1_grasped", "t5"),
        ExpectedTransition("q1_grasped", "sigma_position", "q2_positioned", "t5"),
        ExpectedTransition("q2_positioned", "sigma_tare", "q3_ready", "t2"),
        ExpectedTransition("q3_ready", "sigma_pour", "q4_weighing", "t4"),
        ExpectedTransition("q4_weighing", "sigma_target_mass", "q5_weighed", "t3"),
        ExpectedTransition("q5_weighed", "sigma_transfer", "q6_transferred", "t5"),
        ExpectedTransition("q6_transferred", "sigma_stir", "q7_dissolving", "t5"),
        ExpectedTransition("q7_dissolving", "sigma_dissolved", "q_accept", "t6"),
    ]
    return subtasks, deps, expected


def decompose(
    parsed: ParsedInstruction, machine: StateMachine, environment: EnvironmentCheck | None = None
) -> TaskPlan:
    """Assemble the task plan and validate it before returning."""
    if parsed.kind == "weigh_and_dissolve":
        subtasks, deps, expected = _weighing_tasks(parsed)
        sources = ["statistical_estimates", "sensor_estimates", "state_transitions", "anomaly_reports"]
    else:
        subtasks, deps, expected = _titration_tasks(parsed)
        sources = ["statistical_estimates", "audio_estimates", "state_transitions", "anomaly_reports"]
    plan = TaskPlan(
        parsed_instruction=parsed,
        environment_check=environment or EnvironmentCheck(True, [], None),
        state_machine=machine,
        subtasks=subtasks,
        dependencies=deps,
        expected_transitions=expected,
        stat_logger=StatLoggerConfig(True, "q3_ready", AgentId.VISION, ["t5"]),
        recorder=RecorderConfig(True, sources),
    )
    problems = validate_plan(plan)
    if problems:
        raise InvalidPlan("; ".join(problems))
    return plan


def compile_plan(text: str, grammar: GrammarProfile, inventory: Inventory) -> TaskPlan:
    parsed = parse_instruction(text, grammar)
    env = check_environment(parsed, inventory)
    machine = build_state_machine(parsed)
    return decompose(parsed, machine, env)
