"""Rule-based vision and audio supervisors.

The vision supervisor owns the state-machine cursor.  It turns completion
reports, acoustic detections and sensor readings into transitions, and it
schedules the actuators by sending hold / resume / reset commands to the
quantity logger.  The audio supervisor validates droplet sounds against the
dispensing state, counts them into an audio quantity estimate and raises a
timeout when dispensing produces no sound.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .fsm import MachineCursor, UndefinedTransition
from .plant import AcousticEvent, NOMINAL_DROP_ML, SensorFrame
from .protocol import AgentId, AgentMessage, MessageBus

EXPECTED = "Expected"
ANOMALOUS = "Anomalous"
EVENT_TIMEOUT = "sigma_event_timeout"
_EPS_T = 1e-9


@dataclass(frozen=True)
class StabilityConfig:
    window_s: float = 1.0
    max_delta: float = 0.02


@dataclass(frozen=True)
class EndpointConfig:
    target: float
    tolerance: float = 0.05
    hold_s: float = 5.0
    approach_epsilon: float = 0.005
    verify_delay_s: float = 1.0
    timeout_factor: float = 3.0
    max_attempts: int = 5

    def __post_init__(self) -> None:
        if self.hold_s <= 0:
            raise ValueError("hold_s must be positive")


def _trailing(window: Sequence[tuple[float, float]], span: float) -> list[float] | None:
    if not window:
        return None
    t_end = window[-1][0]
    if window[0][0] > t_end - span + _EPS_T:
        return None
    cut = t_end - span - _EPS_T
    return [v for t, v in window if t >= cut]


def detect_stability(window: Sequence[tuple[float, float]], config: StabilityConfig) -> bool:
    """True when readings over the trailing ``window_s`` vary by at most ``max_delta``."""
    vals = _trailing(window, config.window_s)
    if vals is None:
        return False
    return max(vals) - min(vals) <= config.max_delta + 1e-12


def detect_endpoint(window: Sequence[tuple[float, float]], config: EndpointConfig) -> bool:
    """True when every reading of the trailing ``hold_s`` lies within target +/- tolerance."""
    vals = _trailing(window, config.hold_s)
    if vals is None:
        return False
    lo, hi = config.target - config.tolerance - 1e-12, config.target + config.tolerance + 1e-12
    return all(lo <= v <= hi for v in vals)


def endpoint_persists(values: Sequence[float], config: EndpointConfig) -> bool:
    """Verification after the hold: the mean of readings taken since the endpoint stays in the band."""
    if not values:
        return False
    return abs(float(np.mean(values)) - config.target) <= config.tolerance + 1e-12


def classify_event(
    event: AcousticEvent, q_t: str, dispensing_active: bool, expecting: Iterable[str] = ("q4_titrating",)
) -> str:
    if dispensing_active and q_t in set(expecting):
        return EXPECTED
    return ANOMALOUS


def estimate_audio_quantity(
    events: Sequence[AcousticEvent], v_nominal: float = NOMINAL_DROP_ML, baseline: float = 0.5
) -> tuple[float, float]:
    """Count-based audio estimate: ``(n * v_nominal, mean clarity)``."""
    if not events:
        return 0.0, baseline
    gamma = float(np.clip(np.mean([e.clarity for e in events]), 0.0, 1.0))
    return len(events) * v_nominal, gamma


def check_timeout(last_event_time: float, now: float, limit: float, dispensing_active: bool) -> str | None:
    if dispensing_active and now - last_event_time > limit + _EPS_T:
        return EVENT_TIMEOUT
    return None


# ---------------------------------------------------------------- audio agent


class AudioSupervisor:
    def __init__(
        self,
        bus: MessageBus,
        v_nominal: float = NOMINAL_DROP_ML,
        timeout_limit: float = 10.0,
        expecting: Iterable[str] = ("q4_titrating",),
        baseline: float = 0.5,
        subtask: str = "t6",
    ):
        self.bus = bus
        self.v_nominal = v_nominal
        self.timeout_limit = timeout_limit
        self.expecting = frozenset(expecting)
        self.baseline = baseline
        self.subtask = subtask
        self.q_audio = 0.0
        self.expected: list[AcousticEvent] = []
        self.anomalous: list[AcousticEvent] = []
        self.last_event_time = 0.0
        self.dispensing_since: float | None = None
        self.timeouts = 0

    @property
    def gamma(self) -> float:
        return estimate_audio_quantity(self.expected, self.v_nominal, self.baseline)[1]

    def _send(self, receiver: AgentId, q: str, payload: dict[str, Any], now: float) -> None:
        self.bus.send(AgentMessage(AgentId.AUDIO, receiver, self.subtask, q, payload, now))

    def step(self, now: float, frame: SensorFrame, q_t: str, dispensing_active: bool) -> list[str]:
        """Process one frame; returns the classification of each event."""
        if dispensing_active and self.dispensing_since is None:
            self.dispensing_since = now
        elif not dispensing_active:
            self.dispensing_since = None
        labels = []
        for ev in frame.events:
            label = classify_event(ev, q_t, dispensing_active, self.expecting)
            labels.append(label)
            self.last_event_time = ev.timestamp
            estimate = {
                "kind": "estimate",
                "channel": "audio",
                "value": self.v_nominal,
                "unit": "mL",
                "confidence": ev.clarity,
                "amplitude": ev.amplitude,
                "timestamp": now,
            }
            if label == EXPECTED:
                self.expected.append(ev)
                self.q_audio = len(self.expected) * self.v_nominal
                self._send(AgentId.RECORDER, q_t, estimate, now)
                self._send(
                    AgentId.VISION,
                    q_t,
                    {"kind": "completion", "subtask": self.subtask, "symbol": "sigma_audio_detect",
                     "success": True, "timestamp": now},
                    now,
                )
            else:
                self.anomalous.append(ev)
                self._send(AgentId.RECORDER, q_t, {**estimate, "expected": False}, now)
                self._send(
                    AgentId.VISION,
                    q_t,
                    {"kind": "anomaly", "code": "unexpected_droplet",
                     "detail": "droplet sound without a dispensing command", "timestamp": now},
                    now,
                )
        if self.dispensing_since is not None:
            ref = max(self.last_event_time, self.dispensing_since)
            if check_timeout(ref, now, self.timeout_limit, dispensing_active):
                self.timeouts += 1
                self.last_event_time = now
                self._send(
                    AgentId.VISION,
                    q_t,
                    {"kind": "anomaly", "code": "audio_timeout",
                     "detail": f"no droplet sound for {self.timeout_limit:g} s of dispensing",
                     "timestamp": now},
                    now,
                )
        return labels


# ---------------------------------------------------------------- vision agent


@dataclass(frozen=True)
class Decision:
    kind: str  # fire | send | escalate
    symbol: str | None = None
    receiver: str | None = None
    detail: str = ""


@dataclass
class EndpointEvidence:
    start: float
    end: float
    low: float
    high: float
    count: int


class VisionSupervisor:
    """Observer and scheduler for one experiment.

    Parameters
    ----------
    kind : str
        Scenario kind from the plan (titrate_to_ph, titrate_to_color or
        weigh_and_dissolve).
    stability, endpoint
        Detection rules.  For weighing, the endpoint describes the mass band
        that must hold before the target is declared.
    """

    def __init__(
        self,
        bus: MessageBus,
        cursor: MachineCursor,
        plan,
        kind: str,
        stability: StabilityConfig,
        endpoint: EndpointConfig,
        record_period_s: float = 1.0,
        operation_timeout_s: float = 30.0,
        dt: float = 0.1,
    ):
        self.bus = bus
        self.cursor = cursor
        self.plan = plan
        self.kind = kind
        self.stability = stability
        self.endpoint = endpoint
        self.record_period_s = record_period_s
        self.operation_timeout_s = operation_timeout_s
        self.weighing = kind == "weigh_and_dissolve"
        self.since_change: list[tuple[float, float]] = []
        keep = int(round((endpoint.hold_s + 2 * stability.window_s) / dt)) + 4
        self.recent: deque[tuple[float, float]] = deque(maxlen=keep)
        self.requested: set[str] = set()
        self.watch_start: float | None = None
        self.watch_attempts = 0
        self.verify_at: float | None = None
        self.verify_attempts = 0
        self.next_record = 0.0
        self.timeout_since: float | None = None
        self.aborted: str | None = None
        self.drops = 0
        self.points = 0
        self.evidence: EndpointEvidence | None = None
        self.verify_evidence: EndpointEvidence | None = None
        self.baseline: dict[str, float] = {}
        self.decisions: list[Decision] = []
        self.anomaly_codes: list[tuple[float, str]] = []
        self.pending_completion = False

    # ---- helpers

    @property
    def state(self) -> str:
        return self.cursor.current

    def _subtask(self, symbol: str | None, default: str = "t1") -> str:
        if symbol is None:
            return default
        return self.plan.subtask_for_symbol(symbol) or default

    def _send(self, receiver: AgentId, subtask: str, q_target: str, payload: dict, now: float) -> None:
        self.bus.send(AgentMessage(AgentId.VISION, receiver, subtask, q_target, payload, now))
        self.decisions.append(Decision("send", payload.get("symbol") or payload.get("kind"), receiver.value))

    def _command(self, receiver: AgentId, symbol: str, now: float, subtask: str, q_target: str | None = None,
                 **params) -> None:
        payload = {"kind": "command", "symbol": symbol, "params": params}
        self._send(receiver, subtask, q_target or self.state, payload, now)

    def fire(self, symbol: str, now: float) -> bool:
        try:
            self.cursor.step(symbol, now, AgentId.VISION.value)
        except UndefinedTransition as exc:
            self.escalate(now, "undefined_transition", str(exc))
            return False
        self.decisions.append(Decision("fire", symbol))
        return True

    def escalate(self, now: float, code: str, detail: str) -> None:
        if self.aborted is not None:
            return
        self.aborted = code
        self.anomaly_codes.append((now, code))
        payload = {"kind": "anomaly", "code": code, "detail": detail, "timestamp": now}
        self._send(AgentId.RECORDER, "t1", self.state, payload, now)
        self._send(AgentId.PLANNER, "t1", self.state, dict(payload), now)
        self._send(AgentId.STAT_LOGGER, "t4", self.state, {"kind": "command", "symbol": "sigma_stop", "params": {}}, now)
        self.decisions.append(Decision("escalate", None, AgentId.PLANNER.value, code))

    def _record(self, now: float, quantity: str, value: float, unit: str, confidence: float,
                subtask: str = "t2") -> None:
        payload = {
            "kind": "estimate",
            "channel": "sensor",
            "quantity": quantity,
            "value": value,
            "unit": unit,
            "confidence": confidence,
            "timestamp": now,
        }
        self._send(AgentId.RECORDER, subtask, self.state, payload, now)

    def _mean(self, span: float) -> float | None:
        vals = [v for t, v in self.since_change if t >= self.since_change[-1][0] - span - _EPS_T] \
            if self.since_change else []
        return float(np.mean(vals)) if vals else None

    def _reached(self, value: float) -> bool:
        ep = self.endpoint
        start = self.baseline.get("reading")
        if start is not None and start > ep.target:
            return value <= ep.target + ep.approach_epsilon
        return value >= ep.target - ep.approach_epsilon

    def _evidence(self, span: float) -> EndpointEvidence:
        t_end = self.recent[-1][0]
        vals = [(t, v) for t, v in self.recent if t >= t_end - span - _EPS_T]
        return EndpointEvidence(vals[0][0], t_end, min(v for _, v in vals), max(v for _, v in vals), len(vals))

    def _reading(self, frame: SensorFrame) -> float | None:
        if self.weighing:
            return frame.balance
        if self.kind == "titrate_to_color":
            return None if frame.color is None else float(frame.color)
        return frame.ph

    # ---- main step

    def step(self, now: float, frame: SensorFrame, inbox: Sequence[AgentMessage] | None = None) -> list[Decision]:
        """One supervision cycle; ``inbox`` defaults to draining the bus."""
        self.decisions = []
        if inbox is None:
            inbox = self.bus.poll(AgentId.VISION)
        if self.aborted is not None:
            return self.decisions
        for msg in inbox:
            self._handle(now, msg)
            if self.aborted is not None:
                return self.decisions

        if not self._sense(now, frame):
            return self.decisions

        if self.weighing:
            self._weighing_logic(now, frame)
        else:
            self._titration_logic(now, frame)
        return self.decisions

    def _handle(self, now: float, msg: AgentMessage) -> None:
        p = msg.payload or {}
        kind = p.get("kind")
        if kind == "completion":
            symbol = p.get("symbol")
            if msg.sender is AgentId.AUDIO:
                if self.state == "q4_titrating" and self.watch_start is None:
                    if self.fire("sigma_audio_detect", now):
                        self.drops += 1
                        self.since_change = []
                        self._command(AgentId.STAT_LOGGER, "sigma_hold", now, "t4", reason="droplet")
                return
            if not p.get("success", False):
                self.escalate(now, "action_failed", f"{msg.sender.value} could not complete {symbol}")
                return
            if symbol:
                self.pending_completion = False
                self.fire(symbol, now)
                self.since_change = []
        elif kind == "anomaly":
            code = p.get("code", "unknown")
            if msg.sender is AgentId.STAT_LOGGER and code == "escalation":
                self.escalate(now, p.get("cause", "controller_escalation"), p.get("detail", ""))
                return
            self.anomaly_codes.append((now, code))
            self._send(AgentId.RECORDER, msg.subtask, self.state, dict(p), now)
            if code == "audio_timeout":
                self._command(AgentId.STAT_LOGGER, "sigma_reset", now, "t4", anomaly=code)
        elif kind == "estimate" and msg.sender is AgentId.STAT_LOGGER:
            # the logger paused on its own; decide whether to watch or resume
            reason = p.get("reason")
            if reason == "rate_limit" and self.watch_start is None and self.state in ("q4_titrating", "q4_weighing"):
                self._command(AgentId.STAT_LOGGER, "sigma_resume", now, "t4")
            elif reason == "target_reached" and self.watch_start is None:
                self.watch_start = now

    def _sense(self, now: float, frame: SensorFrame) -> bool:
        value = self._reading(frame)
        if frame.ph_status == "timeout":
            if self.timeout_since is None:
                self.timeout_since = now
                self.anomaly_codes.append((now, "sensor_timeout"))
                self._send(
                    AgentId.RECORDER, "t1", self.state,
                    {"kind": "anomaly", "code": "sensor_timeout", "detail": "pH reading frozen", "timestamp": now},
                    now,
                )
                self._command(AgentId.STAT_LOGGER, "sigma_hold", now, "t4", reason="sensor_timeout")
            elif now - self.timeout_since > self.operation_timeout_s:
                self.escalate(now, "sensor_timeout", "pH reading frozen beyond the operation timeout")
            return False
        if self.timeout_since is not None:
            self.timeout_since = None
            self.since_change = []
            self.recent.clear()
            if self.state == "q4_titrating" and self.watch_start is None:
                self._command(AgentId.STAT_LOGGER, "sigma_resume", now, "t4")
        if value is None:
            return True
        self.since_change.append((now, value))
        self.recent.append((now, value))
        if now + _EPS_T >= self.next_record:
            self.next_record = now + self.record_period_s
            if self.weighing:
                self._record(now, "balance_trace", value, "g", 0.95, "t1")
            elif self.kind == "titrate_to_color":
                self._record(now, "color_trace", value, "code", 0.95, "t1")
            else:
                self._record(now, "pH_trace", value, "pH", 0.95, "t1")
            self._record(now, "temperature", frame.temperature, "degC", 0.95, "t1")
        return True

    # ---- titration

    def _titration_logic(self, now: float, frame: SensorFrame) -> None:
        s = self.state
        quantity, unit = ("color", "code") if self.kind == "titrate_to_color" else ("pH", "pH")
        if s == "q0_initial":
            return  # the planner dispatches the first manipulation
        if s == "q1_grasped":
            if "sigma_draw" not in self.requested:
                self.requested.add("sigma_draw")
                self._command(AgentId.ACTION, "sigma_draw", now, "t5", "q2_drawn", action="draw")
            return
        if s == "q2_drawn":
            if detect_stability(self.since_change, self.stability):
                reading = self.since_change[-1][1]
                self.baseline = {"reading": reading, "temperature": frame.temperature, "time": now}
                self._record(now, quantity, reading, unit, 0.95)
                self._record(now, "temperature_start", frame.temperature, "degC", 0.95)
                self.fire("sigma_record", now)
            return
        if s == "q3_ready":
            sl = self.plan.stat_logger
            if sl.activate:
                self._command(AgentId.STAT_LOGGER, "sigma_activate", now, "t4", "q4_titrating",
                              target=self.endpoint.target, start=self.baseline.get("reading"))
            self.fire("sigma_titrate", now)
            return
        if s == "q5_waiting_stable":
            if detect_stability(self.since_change, self.stability):
                reading = self.since_change[-1][1]
                mean = self._mean(self.stability.window_s)
                self.fire("sigma_stable", now)
                self._record(now, quantity, reading, unit, 0.95)
                self.points += 1
                self.fire("sigma_record", now)
                if self._reached(mean):
                    self.watch_start = now
                else:
                    self._command(AgentId.STAT_LOGGER, "sigma_resume", now, "t4")
            return
        if s == "q4_titrating" and self.watch_start is not None:
            if detect_endpoint(self.recent, self.endpoint):
                self.evidence = self._evidence(self.endpoint.hold_s)
                if self.fire("sigma_endpoint", now):
                    self.verify_at = now + self.endpoint.verify_delay_s
            elif now - self.watch_start >= self.endpoint.timeout_factor * self.endpoint.hold_s:
                self.watch_attempts += 1
                mean = self._mean(self.stability.window_s)
                if self.watch_attempts > self.endpoint.max_attempts:
                    self.escalate(now, "endpoint_unconfirmed", "readings never held inside the endpoint band")
                elif mean is not None and not self._reached(mean):
                    self.watch_start = None
                    self._command(AgentId.STAT_LOGGER, "sigma_resume", now, "t4")
                elif mean is not None and abs(mean - self.endpoint.target) > self.endpoint.tolerance:
                    self.escalate(now, "endpoint_overshoot", f"reading {mean:.3f} beyond the endpoint band")
                else:
                    self.watch_start = now
            return
        if s == "q6_complete" and self.verify_at is not None and now + _EPS_T >= self.verify_at:
            since = [v for t, v in self.recent if t > self.evidence.end + _EPS_T]
            if endpoint_persists(since, self.endpoint):
                self.verify_evidence = self._evidence(now - self.evidence.end)
                self._record(now, "temperature_end", frame.temperature, "degC", 0.95, "t7")
                self.fire("sigma_verify", now)
            else:
                self.verify_attempts += 1
                self.verify_at = now + self.endpoint.verify_delay_s
                if self.verify_attempts > self.endpoint.max_attempts:
                    self.escalate(now, "endpoint_unverified", "endpoint did not persist")

    # ---- weighing

    def _weighing_logic(self, now: float, frame: SensorFrame) -> None:
        s = self.state
        if s == "q1_grasped" and "sigma_position" not in self.requested:
            self.requested.add("sigma_position")
            self._command(AgentId.ACTION, "sigma_position", now, "t5", "q2_positioned", action="position")
        elif s == "q2_positioned" and "sigma_tare" not in self.requested:
            if detect_stability(self.since_change, self.stability):
                self.requested.add("sigma_tare")
                self._command(AgentId.ACTION, "sigma_tare", now, "t2", "q3_ready", action="tare")
        elif s == "q3_ready":
            if detect_stability(self.since_change, self.stability):
                self.baseline = {"reading": self.since_change[-1][1], "temperature": frame.temperature, "time": now}
                self._record(now, "temperature_start", frame.temperature, "degC", 0.95)
                self._command(AgentId.STAT_LOGGER, "sigma_activate", now, "t4", "q4_weighing",
                              target=self.endpoint.target, start=self.baseline["reading"])
                self.fire("sigma_pour", now)
        elif s == "q4_weighing" and self.watch_start is not None:
            if detect_endpoint(self.recent, self.endpoint):
                self.evidence = self._evidence(self.endpoint.hold_s)
                reading = self.recent[-1][1]
                self._send(AgentId.RECORDER, "t3", s,
                           {"kind": "command", "symbol": "sigma_flush", "params": {"sensor": reading}}, now)
                if self.fire("sigma_target_mass", now):
                    self._command(AgentId.ACTION, "sigma_transfer", now, "t5", "q6_transferred", action="transfer")
            elif now - self.watch_start >= self.endpoint.timeout_factor * self.endpoint.hold_s:
                self.watch_attempts += 1
                mean = self._mean(self.stability.window_s)
                if mean is not None and mean > self.endpoint.target + self.endpoint.tolerance:
                    self.escalate(now, "mass_overshoot", f"balance reads {mean:.3f} g")
                elif self.watch_attempts > self.endpoint.max_attempts:
                    self.escalate(now, "endpoint_unconfirmed", "balance never settled in the target band")
                elif mean is not None and not self._reached(mean):
                    self.watch_start = None
                    self._command(AgentId.STAT_LOGGER, "sigma_resume", now, "t4")
                else:
                    self.watch_start = now
        elif s == "q6_transferred" and "sigma_stir" not in self.requested:
            self.requested.add("sigma_stir")
            self._command(AgentId.ACTION, "sigma_stir", now, "t5", "q7_dissolving", action="stir")
        elif s == "q7_dissolving" and frame.dissolved:
            self._record(now, "dissolution", 1.0, "flag", 0.95, "t6")
            self._record(now, "temperature_end", frame.temperature, "degC", 0.95, "t6")
            if self.fire("sigma_dissolved", now):
                self._command(AgentId.ACTION, "sigma_stop_stir", now, "t5", action="stop_stir")


def supervise_step(ctx: VisionSupervisor, frame: SensorFrame, inbox: Sequence[AgentMessage]) -> list[Decision]:
    return ctx.step(frame.timestamp, frame, inbox)
