"""Statistics-based quantity logger: a motion / waiting / reset controller.

The controller converts commanded gripper displacement into a dispensed
quantity through a linear calibration ``dq = k * dd`` and keeps a running
total.  In mass mode the "displacement" is simply poured grams and ``k = 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from .plant import ActuatorCommand, D_DROP_MM, NOMINAL_DROP_ML

K_ML_PER_MM = NOMINAL_DROP_ML / D_DROP_MM


class NegativeDisplacement(ValueError):
    pass


class Phase(str, enum.Enum):
    MOTION = "Motion"
    WAITING = "Waiting"
    RESET = "Reset"


LEGAL_EDGES = frozenset(
    {
        (Phase.MOTION, Phase.WAITING),
        (Phase.WAITING, Phase.MOTION),
        (Phase.MOTION, Phase.RESET),
        (Phase.WAITING, Phase.RESET),
        (Phase.RESET, Phase.MOTION),
        (Phase.RESET, "escalate"),
    }
)


def map_displacement(dd: float, k: float) -> float:
    """Quantity dispensed by a closing displacement ``dd`` (mm)."""
    if dd < 0:
        raise NegativeDisplacement(f"closing displacement must be >= 0, got {dd}")
    return k * dd


@dataclass(frozen=True)
class ControllerConfig:
    """Controller tuning.

    ``rate`` and ``fine_rate`` are mm/s in volume mode and g/s in mass mode.
    ``fine_threshold`` and ``epsilon`` are in the units of the target.
    """

    k: float = K_ML_PER_MM
    rate: float = D_DROP_MM / 0.2
    fine_rate: float = D_DROP_MM / 1.0
    target: float = 12.5
    epsilon: float = 0.005
    fine_threshold: float = 1.0
    rate_of_change_limit: float = 0.5
    max_retries: int = 3
    retract_ticks: int = 5
    mode: str = "volume"
    gamma_motion: float = 0.9
    gamma_reset: float = 0.0

    def __post_init__(self) -> None:
        if self.k <= 0 or self.rate <= 0 or self.fine_rate <= 0 or self.epsilon <= 0:
            raise ValueError("k, rates and epsilon must be positive")
        if self.fine_rate > self.rate:
            raise ValueError("fine_rate must not exceed rate")
        if self.mode not in ("volume", "mass"):
            raise ValueError("mode must be 'volume' or 'mass'")

    @classmethod
    def from_config(cls, d: Mapping[str, Any] | None, **override) -> "ControllerConfig":
        d = dict(d or {})
        if "rate_drops_per_s" in d:
            d["rate"] = D_DROP_MM * float(d.pop("rate_drops_per_s"))
        if "fine_rate_drops_per_s" in d:
            d["fine_rate"] = D_DROP_MM * float(d.pop("fine_rate_drops_per_s"))
        d.update(override)
        fields = set(cls.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ControllerState:
    phase: Phase = Phase.WAITING
    q_stat: float = 0.0
    displacement_total: float = 0.0
    last_measure: float | None = None
    last_change_rate: float = 0.0
    reset_reason: str | None = None
    retries: int = 0
    retract_left: int = 0
    escalated: bool = False
    resume_pending: bool = False
    active: bool = False


@dataclass(frozen=True)
class Observation:
    measured: float | None
    dt: float
    anomaly: str | None = None
    resume: bool = False
    hold: bool = False
    progress: bool = False


@dataclass(frozen=True)
class EstimateRecord:
    q_stat: float
    delta: float
    confidence: float
    phase: Phase
    escalation: str | None = None


def _reached(measured: float, cfg: ControllerConfig, start: float | None) -> bool:
    """Direction-aware target test: approaching from below stops at target - eps."""
    if start is not None and start > cfg.target:
        return measured <= cfg.target + cfg.epsilon
    return measured >= cfg.target - cfg.epsilon


def gamma_s(state: ControllerState, cfg: ControllerConfig) -> float:
    return cfg.gamma_reset if state.phase is Phase.RESET else cfg.gamma_motion


def accumulated(state: ControllerState, cfg: ControllerConfig) -> tuple[float, float]:
    return state.q_stat, gamma_s(state, cfg)


def controller_step(
    state: ControllerState, cfg: ControllerConfig, obs: Observation, start: float | None = None
) -> tuple[ControllerState, ActuatorCommand, EstimateRecord | None]:
    """One synchronous controller update.

    Parameters
    ----------
    state, cfg
        Current state and tuning.
    obs : Observation
        Measured value (window mean of the sensor), supervisor commands and
        anomaly flag for this tick.
    start : float, optional
        Initial measured value, used to decide the approach direction.

    Returns
    -------
    new_state, command, record
        ``record`` is emitted whenever the controller actuates or escalates.
    """
    if obs.dt <= 0:
        raise ValueError("dt must be positive")
    if not state.active or state.escalated:
        return state, ActuatorCommand(), None

    rate = 0.0
    if obs.measured is not None and state.last_measure is not None:
        rate = abs(obs.measured - state.last_measure) / obs.dt
    s = replace(
        state,
        last_measure=obs.measured if obs.measured is not None else state.last_measure,
        last_change_rate=rate,
        resume_pending=state.resume_pending or obs.resume,
    )
    if obs.progress:
        s = replace(s, retries=0)

    if obs.anomaly is not None and s.phase is not Phase.RESET:
        retries = s.retries + 1
        if retries > cfg.max_retries:
            s = replace(s, phase=Phase.RESET, reset_reason=obs.anomaly, retries=retries, escalated=True,
                        retract_left=0, resume_pending=False)
            return s, ActuatorCommand(), EstimateRecord(s.q_stat, 0.0, cfg.gamma_reset, s.phase, obs.anomaly)
        s = replace(s, phase=Phase.RESET, reset_reason=obs.anomaly, retries=retries,
                    retract_left=cfg.retract_ticks, resume_pending=False)

    if s.phase is Phase.RESET:
        if s.retract_left > 0:
            s = replace(s, retract_left=s.retract_left - 1)
            if cfg.mode == "volume":
                return s, ActuatorCommand(closure_rate=-cfg.rate), None
            return s, ActuatorCommand(), None
        s = replace(s, phase=Phase.MOTION, reset_reason=None)

    if s.phase is Phase.WAITING:
        stable = s.last_change_rate <= cfg.rate_of_change_limit
        reached = obs.measured is not None and _reached(obs.measured, cfg, start)
        if s.resume_pending and stable and not reached:
            s = replace(s, phase=Phase.MOTION, resume_pending=False)
        else:
            return s, ActuatorCommand(), None

    # Motion
    if obs.hold:
        return replace(s, phase=Phase.WAITING, resume_pending=False), ActuatorCommand(), None
    if obs.measured is not None:
        if _reached(obs.measured, cfg, start) or s.last_change_rate > cfg.rate_of_change_limit:
            return replace(s, phase=Phase.WAITING, resume_pending=False), ActuatorCommand(), None
    fine = obs.measured is not None and abs(obs.measured - cfg.target) <= cfg.fine_threshold
    r = cfg.fine_rate if fine else cfg.rate
    dd = r * obs.dt
    dq = map_displacement(dd, cfg.k)
    s = replace(s, displacement_total=s.displacement_total + dd, q_stat=s.q_stat + dq)
    if cfg.mode == "volume":
        cmd = ActuatorCommand(closure_rate=r)
    else:
        cmd = ActuatorCommand(pour_rate=r)
    return s, cmd, EstimateRecord(s.q_stat, dq, cfg.gamma_motion, s.phase)


@dataclass
class QuantityLogger:
    """Stateful wrapper used by the simulation loop."""

    config: ControllerConfig
    state: ControllerState = field(default_factory=ControllerState)
    start: float | None = None
    phase_log: list[tuple[float, str]] = field(default_factory=list)

    def activate(self, t: float, measured: float | None) -> None:
        self.state = replace(self.state, active=True, phase=Phase.WAITING, resume_pending=True)
        self.start = measured
        self.phase_log.append((t, Phase.WAITING.value))

    def step(self, t: float, obs: Observation) -> tuple[ActuatorCommand, EstimateRecord | None]:
        before = self.state.phase
        self.state, cmd, rec = controller_step(self.state, self.config, obs, self.start)
        if self.state.escalated and (not self.phase_log or self.phase_log[-1][1] != "escalate"):
            if before is not Phase.RESET:
                self.phase_log.append((t, Phase.RESET.value))
            self.phase_log.append((t, "escalate"))
        elif self.state.phase is not before:
            if before is Phase.RESET and self.state.phase is Phase.WAITING:
                # Reset always passes through Motion, even if Motion pauses at once
                self.phase_log.append((t, Phase.MOTION.value))
            self.phase_log.append((t, self.state.phase.value))
        return cmd, rec

    @property
    def dispensing(self) -> bool:
        return self.state.active and self.state.phase is Phase.MOTION and not self.state.escalated
