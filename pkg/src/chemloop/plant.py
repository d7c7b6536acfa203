"""Seeded simulation of the bench: vessel, pipette gripper, probe and balance.

The plant is advanced in fixed ticks.  Chemistry is instantaneous (perfect
mixing); all lag lives in the pH probe, which relaxes toward the equilibrium
value with time constant ``tau`` and reports with Gaussian noise.

Droplets fall whenever the cumulative closing displacement of the gripper
crosses a multiple of ``d_drop``.  Each fallen droplet produces one acoustic
event; the event carries the true volume for tests only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .chemistry import AcidSpec, IndicatorSpec, SolutionState, indicator_color, ph_of

NOMINAL_DROP_ML = 0.046875
D_DROP_MM = 0.000415625
FAULT_KINDS = ("droplet_failure", "sensor_timeout", "stuck_gripper")


class OverlappingFault(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    window: tuple[float, float]
    name: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        start, end = self.window
        if not start < end:
            raise ValueError("fault window must satisfy start < end")

    def active(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]

    @classmethod
    def from_config(cls, d: Mapping[str, Any]) -> "FaultSpec":
        start, end = d["window"]
        return cls(str(d["kind"]), (float(start), float(end)), str(d.get("name", "")), dict(d.get("params", {})))


@dataclass(frozen=True)
class PlantConfig:
    dt: float = 0.1
    tau: float = 0.5
    ph_noise_sigma: float = 0.02
    droplet_volume_ml: float = NOMINAL_DROP_ML
    d_drop_mm: float = D_DROP_MM
    jitter: float = 0.03
    jitter_clamp: float = 0.10
    clarity: tuple[float, float] = (0.6, 0.98)
    amplitude: tuple[float, float] = (0.4, 1.0)
    grain_g: float = 0.02
    temperature_c: float = 25.0
    temperature_sigma: float = 0.05
    balance_sigma: float = 0.001
    dissolve_mean_s: float = 45.0
    dissolve_sd_s: float = 2.6

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.tau <= 0:
            raise ValueError("dt and tau must be positive")
        if self.ph_noise_sigma < 0 or self.jitter < 0 or self.grain_g < 0:
            raise ValueError("noise parameters must be non-negative")
        lo, hi = self.clarity
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("clarity range must lie in [0, 1]")

    @classmethod
    def from_config(cls, d: Mapping[str, Any] | None) -> "PlantConfig":
        d = dict(d or {})
        droplet = d.pop("droplet", {}) or {}
        kw: dict[str, Any] = {}
        mapping = {
            "dt": "dt",
            "tau": "tau",
            "ph_noise_sigma": "ph_noise_sigma",
            "grain_g": "grain_g",
            "temperature_c": "temperature_c",
            "temperature_sigma": "temperature_sigma",
            "balance_sigma": "balance_sigma",
            "dissolve_mean_s": "dissolve_mean_s",
            "dissolve_sd_s": "dissolve_sd_s",
        }
        for key, attr in mapping.items():
            if key in d:
                kw[attr] = float(d.pop(key))
        if "volume_ml" in droplet:
            kw["droplet_volume_ml"] = float(droplet["volume_ml"])
        if "d_drop_mm" in droplet:
            kw["d_drop_mm"] = float(droplet["d_drop_mm"])
        if "jitter" in droplet:
            kw["jitter"] = float(droplet["jitter"])
        if "jitter_clamp" in droplet:
            kw["jitter_clamp"] = float(droplet["jitter_clamp"])
        if "clarity" in droplet:
            kw["clarity"] = tuple(float(x) for x in droplet["clarity"])
        if "amplitude" in droplet:
            kw["amplitude"] = tuple(float(x) for x in droplet["amplitude"])
        return cls(**kw)


@dataclass(frozen=True)
class ActuatorCommand:
    closure_rate: float = 0.0  # mm/s, negative retracts
    pour_rate: float = 0.0  # g/s
    stir: bool = False
    tare: bool = False
    transfer: bool = False


IDLE = ActuatorCommand()


@dataclass(frozen=True)
class AcousticEvent:
    timestamp: float
    amplitude: float
    clarity: float
    true_volume: float


@dataclass(frozen=True)
class SensorFrame:
    timestamp: float
    ph: float | None
    ph_status: str
    temperature: float
    balance: float | None
    color: int | None
    dissolved: bool
    events: tuple[AcousticEvent, ...] = ()


class Plant:
    """Mutable plant state plus the operations that advance it.

    Parameters
    ----------
    config : PlantConfig
    seed : int
        Seeds the plant's private ``numpy.random.Generator``.
    analyte : AcidSpec, optional
        Acid/base mode: the acid initially in the vessel.
    titrant_conc : float
        mol/L of the titrant (NaOH or EDTA).
    calcium : tuple of (mol/L, L), optional
        Complexometric mode: calcium solution in the flask.
    indicator : IndicatorSpec, optional
    """

    def __init__(
        self,
        config: PlantConfig,
        seed: int,
        *,
        analyte: AcidSpec | None = None,
        titrant_conc: float = 0.1,
        calcium: tuple[float, float] | None = None,
        indicator: IndicatorSpec | None = None,
    ):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.clock = 0.0
        self._ticks = 0
        self.titrant_conc = titrant_conc
        self.analyte = analyte
        self.calcium = calcium
        self.indicator = indicator or IndicatorSpec()
        if analyte is not None:
            self.mode = "acid_base"
            self.solution: SolutionState | None = SolutionState.from_analyte(analyte)
        elif calcium is not None:
            self.mode = "complexometric"
            self.solution = None
        else:
            self.mode = "weighing"
            self.solution = None
        # gripper
        self.closure_total = 0.0
        self.position = 0.0
        self._progress = 0.0
        # dispensing bookkeeping
        self.dispensed_ml = 0.0
        self.droplets: list[AcousticEvent] = []
        self.failed_drops = 0
        # probe
        self.equilibrium_ph = self._equilibrium_ph()
        self.sensed_ph = self.equilibrium_ph if self.equilibrium_ph is not None else 7.0
        self._alpha = 1.0 - math.exp(-config.dt / config.tau)
        self._last_reading: float | None = None
        # complexometric
        self.edta_moles = 0.0
        # weighing
        self.boat_mass = 0.0
        self.tare_offset = 0.0
        self.transferred_mass = 0.0
        self.dissolve_after: float | None = None
        self.stir_elapsed = 0.0
        self.dissolved = False
        self.faults: list[FaultSpec] = []
        self.last_frame: SensorFrame | None = None

    # ------------------------------------------------------------ faults

    def inject_fault(self, fault: FaultSpec) -> None:
        if fault.window[0] < self.clock:
            raise ValueError("fault window must start in the future")
        for other in self.faults:
            if other.kind == fault.kind and other.window[0] < fault.window[1] and fault.window[0] < other.window[1]:
                raise OverlappingFault(f"{fault.kind} windows {other.window} and {fault.window} overlap")
        self.faults.append(fault)

    def fault_active(self, kind: str, t: float | None = None) -> bool:
        t = self.clock if t is None else t
        return any(f.kind == kind and f.active(t) for f in self.faults)

    # ------------------------------------------------------------ chemistry

    def _equilibrium_ph(self) -> float | None:
        if self.solution is None:
            return None
        return ph_of(self.solution)

    @property
    def color_label(self) -> str | None:
        if self.mode != "complexometric":
            return None
        conc, vol = self.calcium
        return indicator_color(conc * vol, self.edta_moles, self.indicator)

    def _add_titrant(self, volume_ml: float) -> None:
        moles = self.titrant_conc * volume_ml * 1e-3
        if self.mode == "acid_base":
            self.solution = self.solution.add_base(moles, volume_ml * 1e-3)
        elif self.mode == "complexometric":
            self.edta_moles += moles

    # ------------------------------------------------------------ ticking

    def _droplet(self) -> AcousticEvent:
        cfg = self.config
        dev = 0.0
        if cfg.jitter > 0:
            dev = float(np.clip(self.rng.normal(0.0, cfg.jitter), -cfg.jitter_clamp, cfg.jitter_clamp))
        volume = cfg.droplet_volume_ml * (1.0 + dev)
        clarity = float(self.rng.uniform(*cfg.clarity))
        amplitude = float(self.rng.uniform(*cfg.amplitude))
        return AcousticEvent(self.clock, amplitude, clarity, volume)

    def _apply_closure(self, rate: float, dt: float) -> list[AcousticEvent]:
        if rate == 0.0:
            return []
        delta = rate * dt
        if rate < 0:
            self.position += delta
            return []
        if self.fault_active("stuck_gripper"):
            return []
        self.position += delta
        self.closure_total += delta
        self._progress += delta
        d = self.config.d_drop_mm
        tol = 1e-9 * d
        events = []
        failing = self.fault_active("droplet_failure")
        while self._progress >= d - tol:
            self._progress = max(self._progress - d, 0.0)
            if failing:
                self.failed_drops += 1
                continue
            ev = self._droplet()
            events.append(ev)
            self.droplets.append(ev)
            self.dispensed_ml += ev.true_volume
            self._add_titrant(ev.true_volume)
        return events

    def _apply_pour(self, rate: float, dt: float) -> None:
        if rate <= 0:
            return
        grain = self.config.grain_g
        if grain == 0:
            self.boat_mass += rate * dt
            return
        n = int(self.rng.poisson(rate * dt / grain))
        self.boat_mass += n * grain

    def _balance_reading(self) -> float:
        noise = self.rng.normal(0.0, self.config.balance_sigma) if self.config.balance_sigma > 0 else 0.0
        return round(self.boat_mass - self.tare_offset + noise, 3)

    def tick(self, dt: float, command: ActuatorCommand = IDLE) -> SensorFrame:
        """Advance the plant by ``dt`` seconds under ``command``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        cfg = self.config
        self._ticks += 1
        self.clock = round(self._ticks * dt, 6) if dt == cfg.dt else round(self.clock + dt, 9)

        events = self._apply_closure(command.closure_rate, dt)
        if events and self.mode == "acid_base":
            self.equilibrium_ph = self._equilibrium_ph()

        balance = None
        if self.mode == "weighing":
            if command.tare:
                self.tare_offset = self.boat_mass
            self._apply_pour(command.pour_rate, dt)
            if command.transfer and self.boat_mass > 0:
                self.transferred_mass += self.boat_mass
                self.boat_mass = 0.0
                self.tare_offset = 0.0
            if command.stir and self.transferred_mass > 0 and not self.dissolved:
                if self.dissolve_after is None:
                    self.dissolve_after = max(
                        1.0, float(self.rng.normal(cfg.dissolve_mean_s, cfg.dissolve_sd_s))
                    )
                self.stir_elapsed += dt
                if self.stir_elapsed >= self.dissolve_after:
                    self.dissolved = True
            balance = self._balance_reading()

        ph = None
        status = "n/a"
        if self.mode == "acid_base":
            alpha = self._alpha if dt == cfg.dt else 1.0 - math.exp(-dt / cfg.tau)
            self.sensed_ph += (self.equilibrium_ph - self.sensed_ph) * alpha
            if self.fault_active("sensor_timeout") and self._last_reading is not None:
                ph, status = self._last_reading, "timeout"
            else:
                ph = self.sensed_ph
                if cfg.ph_noise_sigma > 0:
                    ph += cfg.ph_noise_sigma * float(self.rng.standard_normal())
                status = "ok"
                self._last_reading = ph

        temperature = cfg.temperature_c
        if cfg.temperature_sigma > 0:
            temperature += cfg.temperature_sigma * float(self.rng.standard_normal())

        color = None
        if self.mode == "complexometric":
            color = self.indicator.code(self.color_label)

        frame = SensorFrame(self.clock, ph, status, temperature, balance, color, self.dissolved, tuple(events))
        self.last_frame = frame
        return frame

    def pour_solid(self, dt: float, rate: float) -> SensorFrame:
        if rate < 0:
            raise ValueError("pour rate must be non-negative")
        return self.tick(dt, ActuatorCommand(pour_rate=rate))

    def read_ph(self) -> tuple[float | None, str]:
        if self.last_frame is None:
            return self._last_reading, "n/a"
        return self.last_frame.ph, self.last_frame.ph_status

    @property
    def transferred_volume_ml(self) -> float:
        """Titrant actually in the vessel (sum of true droplet volumes)."""
        return self.dispensed_ml
