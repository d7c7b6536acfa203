"""The closed loop: plant, agents and bus stepped together in fixed ticks.

Tick order is fixed: plant (applying the previous tick's actuator command),
audio supervisor, vision supervisor, quantity logger, action agent, recorder,
planner.  Agents only talk through the bus; the sensor frame of the tick is
the one thing every observer reads directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from .chemistry import AcidSpec, IndicatorSpec
from .config import ConfigError, ScenarioConfig
from .controller import ControllerConfig, Observation, Phase, QuantityLogger, _reached
from .fsm import MachineCursor
from .fusion import Datastore, Recorder, smooth_single_source
from .plant import IDLE, ActuatorCommand, Plant, SensorFrame
from .planner import (
    GrammarProfile,
    Inventory,
    PlannerError,
    build_state_machine,
    check_environment,
    decompose,
    parse_instruction,
)
from .protocol import AgentId, AgentMessage, MessageBus, TaskPlan
from .supervisors import AudioSupervisor, EndpointConfig, StabilityConfig, VisionSupervisor

EXIT_OK, EXIT_CONFIG, EXIT_ENVIRONMENT, EXIT_ESCALATED = 0, 1, 2, 3

# anomalies that concern dispensing itself; they attenuate the open fusion window
EXECUTION_ANOMALIES = frozenset({"audio_timeout", "unexpected_droplet"})

DEFAULT_DURATIONS = {
    "sigma_grasp": 2.0,
    "sigma_draw": 3.0,
    "sigma_position": 2.0,
    "sigma_tare": 1.0,
    "sigma_transfer": 3.0,
    "sigma_stir": 2.0,
    "sigma_stop_stir": 0.0,
}


# ---------------------------------------------------------------- agents


class PlannerAgent:
    """Dispatches the first manipulation and collects escalations."""

    def __init__(self, bus: MessageBus, plan: TaskPlan):
        self.bus = bus
        self.plan = plan
        self.escalations: list[dict[str, Any]] = []

    def start(self, now: float) -> None:
        first = self.plan.subtask("t5")
        self.bus.send(
            AgentMessage(AgentId.PLANNER, AgentId.ACTION, first.id, first.resulting_state,
                         {"kind": "command", "symbol": first.input_symbol, "params": {"action": "grasp"}}, now)
        )

    def step(self, now: float) -> None:
        for msg in self.bus.poll(AgentId.PLANNER):
            if msg.kind == "anomaly":
                self.escalations.append(dict(msg.payload))


class ActionAgent:
    """Scripted manipulation: each command completes after a fixed duration."""

    def __init__(self, bus: MessageBus, durations: Mapping[str, float] | None = None):
        self.bus = bus
        self.durations = {**DEFAULT_DURATIONS, **(durations or {})}
        self.busy: list[tuple[float, AgentMessage]] = []
        self.stirring = False
        self.completed: list[tuple[float, str]] = []

    def step(self, now: float) -> ActuatorCommand:
        for msg in self.bus.poll(AgentId.ACTION):
            symbol = msg.payload["symbol"]
            if symbol == "sigma_stir":
                self.stirring = True
            if symbol == "sigma_stop_stir":
                self.stirring = False
                continue
            self.busy.append((now + self.durations.get(symbol, 1.0), msg))
        tare = transfer = False
        still = []
        for due, msg in self.busy:
            if now + 1e-9 < due:
                still.append((due, msg))
                continue
            symbol = msg.payload["symbol"]
            tare |= symbol == "sigma_tare"
            transfer |= symbol == "sigma_transfer"
            self.completed.append((now, symbol))
            self.bus.send(
                AgentMessage(AgentId.ACTION, AgentId.VISION, msg.subtask, msg.q_target,
                             {"kind": "completion", "subtask": msg.subtask, "symbol": symbol,
                              "success": True, "timestamp": now}, now)
            )
        self.busy = still
        return ActuatorCommand(stir=self.stirring, tare=tare, transfer=transfer)


class StatLoggerAgent:
    """Bus wrapper around :class:`QuantityLogger`.

    The measured value fed to the controller is the mean of the last
    ``window`` readings (titration) or the last reading (mass mode).
    """

    def __init__(self, bus: MessageBus, logger: QuantityLogger, reading, window: int, unit: str, dt: float):
        self.bus = bus
        self.logger = logger
        self.reading = reading
        self.values: list[float] = []
        self.window = window
        self.unit = unit
        self.dt = dt
        self.stopped = False

    def step(self, now: float, frame: SensorFrame, q_t: str) -> ActuatorCommand:
        hold = resume = progress = False
        anomaly = None
        for msg in self.bus.poll(AgentId.STAT_LOGGER):
            symbol = msg.payload["symbol"]
            params = msg.payload.get("params", {})
            if symbol == "sigma_activate":
                self.logger.activate(now, params.get("start"))
                self.logger.config = _retarget(self.logger.config, params.get("target"))
            elif symbol == "sigma_hold":
                hold = True
                progress |= params.get("reason") == "droplet"
            elif symbol == "sigma_resume":
                resume = True
            elif symbol == "sigma_reset":
                anomaly = params.get("anomaly", "anomaly")
            elif symbol == "sigma_stop":
                self.stopped = True
        value = self.reading(frame)
        if value is not None:
            self.values.append(value)
            if len(self.values) > self.window:
                del self.values[0]
        if self.stopped:
            return IDLE
        measured = None
        if self.values:
            measured = self.values[-1] if self.logger.config.mode == "mass" else float(np.mean(self.values))
        before = self.logger.state.phase
        cmd, rec = self.logger.step(now, Observation(measured, self.dt, anomaly, resume, hold, progress))
        if rec is not None and rec.escalation is not None:
            self.stopped = True
            self.bus.send(
                AgentMessage(AgentId.STAT_LOGGER, AgentId.VISION, "t4", q_t,
                             {"kind": "anomaly", "code": "escalation", "cause": "controller_escalation",
                              "detail": f"reset retries exhausted after {rec.escalation}", "timestamp": now}, now)
            )
            return IDLE
        if rec is not None:
            self.bus.send(
                AgentMessage(AgentId.STAT_LOGGER, AgentId.RECORDER, "t4", q_t,
                             {"kind": "estimate", "channel": "stat", "value": rec.delta, "unit": self.unit,
                              "confidence": rec.confidence, "timestamp": now}, now)
            )
        after = self.logger.state.phase
        if before is Phase.MOTION and after is Phase.WAITING and not hold:
            cfg = self.logger.config
            reason = "target_reached" if measured is not None and _reached(measured, cfg, self.logger.start) \
                else "rate_limit"
            self.bus.send(
                AgentMessage(AgentId.STAT_LOGGER, AgentId.VISION, "t4", q_t,
                             {"kind": "estimate", "channel": "stat", "value": self.logger.state.q_stat,
                              "unit": self.unit, "confidence": cfg.gamma_motion, "timestamp": now,
                              "reason": reason}, now)
            )
        return cmd


def _retarget(cfg: ControllerConfig, target: float | None) -> ControllerConfig:
    if target is None or target == cfg.target:
        return cfg
    from dataclasses import replace

    return replace(cfg, target=float(target))


class RecorderAgent:
    """Feeds bus traffic into the fusion recorder and the datastore."""

    def __init__(self, bus: MessageBus, recorder: Recorder, increment_unit: str, mad_window: int = 21):
        self.bus = bus
        self.recorder = recorder
        self.unit = increment_unit
        self.mad_window = mad_window
        self.temperatures: list[tuple[float, float]] = []

    def step(self, now: float, q_t: str) -> None:
        rec = self.recorder
        flush = False
        flush_subtask = "t6"
        for msg in self.bus.poll(AgentId.RECORDER):
            p = msg.payload
            kind = p.get("kind")
            if kind == "estimate":
                channel = p["channel"]
                if channel == "stat":
                    rec.add_stat(now, p["value"], p["confidence"])
                elif channel == "audio":
                    if p.get("expected", True):
                        rec.add_audio(now, p["value"], p["confidence"])
                        flush = True
                elif channel == "sensor":
                    self._single_source(now, msg)
            elif kind == "anomaly":
                code = p["code"]
                rec.write_anomaly(now, code, msg.q_target, msg.subtask)
                if code in EXECUTION_ANOMALIES:
                    rec.add_anomaly(code)
                    flush = True
            elif kind == "command" and p["symbol"] == "sigma_flush":
                rec.add_sensor(now, p["params"]["sensor"], 0.95)
                flush, flush_subtask = True, msg.subtask
        if flush:
            fused = rec.flush(now, q_t, flush_subtask)
            if fused is not None and fused.value is not None:
                name = "volume_total" if rec.quantity == "volume" else "mass_total"
                rec.write(now, name, rec.total, fused.confidence, q_t, flush_subtask)

    def _single_source(self, now: float, msg: AgentMessage) -> None:
        p = msg.payload
        quantity, value, conf = p["quantity"], float(p["value"]), float(p["confidence"])
        if quantity == "temperature":
            self.temperatures.append((now, value))
            _, value, label = smooth_single_source(self.temperatures[-self.mad_window:], self.mad_window)[-1]
            if label == "low":
                conf = 0.3
        raw = {"sensor": {"value": float(p["value"]), "confidence_raw": float(p["confidence"]),
                          "confidence_gated": conf}}
        self.recorder.write(now, quantity, value, conf, msg.q_target, msg.subtask, raw)


# ---------------------------------------------------------------- run


@dataclass
class RunResult:
    scenario: str
    seed: int
    plan: TaskPlan
    status: str  # accepted | environment | escalated | timeout
    exit_code: int
    reason: str | None = None
    feedback: str | None = None
    cursor: MachineCursor | None = None
    store: Datastore = field(default_factory=Datastore)
    plant: Plant | None = None
    vision: VisionSupervisor | None = None
    audio: AudioSupervisor | None = None
    logger: QuantityLogger | None = None
    recorder: Recorder | None = None
    action: ActionAgent | None = None
    sim_time: float = 0.0
    wall_time: float = 0.0
    messages: int = 0
    config: ScenarioConfig | None = None

    @property
    def kind(self) -> str:
        return self.plan.parsed_instruction.kind

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def transitions(self) -> list[dict[str, Any]]:
        return [r.to_dict() for r in self.cursor.history] if self.cursor else []


def build_plan(cfg: ScenarioConfig, grammar: GrammarProfile | None = None) -> TaskPlan:
    grammar = grammar or GrammarProfile.load()
    inventory = Inventory.from_config({name: {} for name in cfg.inventory})
    try:
        parsed = parse_instruction(cfg.instruction, grammar)
        env = check_environment(parsed, inventory)
        return decompose(parsed, build_state_machine(parsed), env)
    except PlannerError as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc


def _target(plan: TaskPlan) -> float:
    tp = plan.parsed_instruction.target_parameters
    for key in ("pH", "color", "mass"):
        if key in tp:
            return float(tp[key][0])
    raise ConfigError("plan carries no target parameter")


def build_plant(cfg: ScenarioConfig, plan: TaskPlan, seed: int) -> Plant:
    parsed = plan.parsed_instruction
    init = parsed.initial_parameters
    if parsed.kind == "titrate_to_ph":
        if cfg.analyte is None:
            raise ConfigError("a pH titration needs an 'analyte' block with kind and pKa values")
        a = cfg.analyte
        spec = AcidSpec(a.name, a.kind, a.pka, float(init["concentration"][0]), a.volume_ml * 1e-3)
        return Plant(cfg.plant, seed, analyte=spec, titrant_conc=float(init["titrant_concentration"][0]))
    if parsed.kind == "titrate_to_color":
        calcium = (float(init["concentration"][0]), float(init["volume"][0]) * 1e-3)
        return Plant(cfg.plant, seed, calcium=calcium, titrant_conc=float(init["titrant_concentration"][0]),
                     indicator=IndicatorSpec())
    return Plant(cfg.plant, seed)


def _reader(kind: str):
    if kind == "weigh_and_dissolve":
        return lambda f: f.balance
    if kind == "titrate_to_color":
        return lambda f: None if f.color is None else float(f.color)
    return lambda f: f.ph


def run_scenario(
    cfg: ScenarioConfig,
    seed: int | None = None,
    enable_faults: Iterable[str] = (),
    grammar: GrammarProfile | None = None,
    keep_bus_log: bool = False,
) -> RunResult:
    """Execute one seeded closed-loop run."""
    wall0 = time.perf_counter()
    seed = cfg.seed if seed is None else int(seed)
    plan = build_plan(cfg, grammar)
    if not plan.environment_check.satisfied:
        return RunResult(cfg.name, seed, plan, "environment", EXIT_ENVIRONMENT, "environment_check",
                         plan.environment_check.user_feedback, config=cfg)
    kind = plan.parsed_instruction.kind
    weighing = kind == "weigh_and_dissolve"
    plant = build_plant(cfg, plan, seed)
    for fault in cfg.active_faults(tuple(enable_faults)):
        plant.inject_fault(fault)

    dt = cfg.plant.dt
    sup = cfg.supervision
    target = _target(plan)
    bus = MessageBus(plan)
    bus.keep_log = keep_bus_log
    cursor = MachineCursor(plan.state_machine)
    stability = StabilityConfig(sup.stability_window_s, sup.stability_max_delta)
    endpoint = EndpointConfig(target, sup.endpoint_tolerance, sup.endpoint_hold_s, sup.approach_epsilon,
                              sup.verify_delay_s, sup.timeout_factor, sup.max_attempts)
    vision = VisionSupervisor(bus, cursor, plan, kind, stability, endpoint, sup.record_period_s,
                              sup.operation_timeout_s, dt)
    audio = None if weighing else AudioSupervisor(bus, cfg.plant.droplet_volume_ml, sup.audio_timeout_s,
                                                  baseline=sup.audio_baseline)
    ctrl_defaults = {"mode": "mass", "k": 1.0} if weighing else {}
    ctrl_cfg = ControllerConfig.from_config({**ctrl_defaults, **cfg.controller}, target=target)
    logger = QuantityLogger(ctrl_cfg)
    window = max(1, int(round(sup.stability_window_s / dt)) + 1)
    unit = "g" if weighing else "mL"
    logger_agent = StatLoggerAgent(bus, logger, _reader(kind), window, unit, dt)
    action = ActionAgent(bus, cfg.action_durations)
    op_states = {"q4_weighing"} if weighing else {"q4_titrating"}
    recorder = Recorder(cfg.fusion, op_states, sup.audio_baseline, "mass" if weighing else "volume",
                        use_audio=not weighing)
    recorder_agent = RecorderAgent(bus, recorder, unit)
    planner = PlannerAgent(bus, plan)

    planner.start(0.0)
    command = IDLE
    status, reason = "timeout", "run_timeout"
    n_max = int(round(cfg.max_time_s / dt))
    now = 0.0
    for _ in range(n_max):
        q_t = cursor.current
        frame = plant.tick(dt, command)
        now = frame.timestamp
        if audio is not None:
            audio.step(now, frame, q_t, command.closure_rate > 0)
        vision.step(now, frame)
        motion = logger_agent.step(now, frame, q_t)
        flags = action.step(now)
        recorder_agent.step(now, q_t)
        planner.step(now)
        command = ActuatorCommand(motion.closure_rate, motion.pour_rate, flags.stir, flags.tare, flags.transfer)
        if cursor.accepting:
            status, reason = "accepted", None
            break
        if vision.aborted is not None or planner.escalations:
            status, reason = "escalated", vision.aborted or planner.escalations[0]["code"]
            break
    else:
        recorder.write_anomaly(now, "run_timeout", cursor.current, "t1")

    return RunResult(
        scenario=cfg.name,
        seed=seed,
        plan=plan,
        status=status,
        exit_code=EXIT_OK if status == "accepted" else EXIT_ESCALATED,
        reason=reason,
        cursor=cursor,
        store=recorder.store,
        plant=plant,
        vision=vision,
        audio=audio,
        logger=logger,
        recorder=recorder,
        action=action,
        sim_time=now,
        wall_time=time.perf_counter() - wall0,
        messages=bus.seq,
        config=cfg,
    )
