"""Scenario configuration: one self-contained YAML file per experiment."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .fusion import FusionConfig
from .plant import FaultSpec, PlantConfig

BUNDLED = ("hcl_titration", "acetic_titration", "maleic_titration", "edta_complexometric", "nacl_weighing")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnalyteConfig:
    name: str
    kind: str
    pka: tuple[float, ...] = ()
    volume_ml: float = 25.0


@dataclass(frozen=True)
class SupervisionConfig:
    stability_window_s: float = 1.0
    stability_max_delta: float = 0.02
    endpoint_tolerance: float = 0.05
    endpoint_hold_s: float = 5.0
    approach_epsilon: float = 0.005
    verify_delay_s: float = 1.0
    timeout_factor: float = 3.0
    max_attempts: int = 20
    audio_timeout_s: float = 10.0
    operation_timeout_s: float = 30.0
    record_period_s: float = 1.0
    audio_baseline: float = 0.5


@dataclass(frozen=True)
class AnalysisConfig:
    resample_step_ml: float = 0.05
    sg_window: int = 11
    sg_order: int = 3
    prominence_factor: float = 5.0
    min_separation_ml: float = 2.0
    zoom_half_width_ml: float = 2.0
    exclusion_half_width_ml: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    instruction: str
    inventory: tuple[str, ...]
    plant: PlantConfig = PlantConfig()
    controller: Mapping[str, Any] = field(default_factory=dict)
    fusion: FusionConfig = FusionConfig()
    supervision: SupervisionConfig = SupervisionConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    analyte: AnalyteConfig | None = None
    faults: tuple[tuple[FaultSpec, bool], ...] = ()
    action_durations: Mapping[str, float] = field(default_factory=dict)
    replicates: int = 1
    seed: int = 42
    max_time_s: float = 5000.0

    def active_faults(self, enable: tuple[str, ...] = ()) -> list[FaultSpec]:
        known = {f.name for f, _ in self.faults}
        unknown = set(enable) - known
        if unknown:
            raise ConfigError(f"unknown fault name(s): {sorted(unknown)}")
        return [f for f, on in self.faults if on or f.name in enable]

    def without_inventory(self, *names: str) -> "ScenarioConfig":
        return replace(self, inventory=tuple(n for n in self.inventory if n not in names))

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "ScenarioConfig":
        try:
            return _from_mapping(d)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        """Load a scenario file; a bare bundled name such as ``hcl_titration`` also works."""
        p = Path(path)
        if not p.exists() and str(path) in BUNDLED:
            text = resources.files("chemloop.scenarios").joinpath(f"{path}.yaml").read_text()
        else:
            try:
                text = p.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError("scenario file must hold a mapping")
        return cls.from_mapping(data)


def _dataclass_from(cls, d: Mapping[str, Any] | None, where: str):
    d = dict(d or {})
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


def _from_mapping(d: Mapping[str, Any]) -> ScenarioConfig:
    for key in ("name", "instruction", "inventory"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")
    analyte = None
    if d.get("analyte"):
        a = dict(d["analyte"])
        analyte = AnalyteConfig(str(a["name"]), str(a["kind"]), tuple(float(x) for x in a.get("pka", ())),
                                float(a.get("volume_ml", 25.0)))
    faults = []
    names = set()
    for f in d.get("faults", []) or []:
        spec = FaultSpec.from_config(f)
        if not spec.name or spec.name in names:
            raise ConfigError(f"faults need unique names, got {spec.name!r}")
        names.add(spec.name)
        faults.append((spec, bool(f.get("enabled", False))))
    replicates = int(d.get("replicates", 1))
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    inventory = d["inventory"]
    if isinstance(inventory, Mapping):
        inventory = [k for k, present in inventory.items() if present]
    if len(set(inventory)) != len(inventory):
        raise ConfigError("inventory lists an item twice")
    return ScenarioConfig(
        name=str(d["name"]),
        instruction=" ".join(str(d["instruction"]).split()),
        inventory=tuple(str(x) for x in inventory),
        plant=PlantConfig.from_config(d.get("plant")),
        controller=dict(d.get("controller", {}) or {}),
        fusion=_dataclass_from(FusionConfig, d.get("fusion"), "fusion"),
        supervision=_dataclass_from(SupervisionConfig, d.get("supervision"), "supervision"),
        analysis=_dataclass_from(AnalysisConfig, d.get("analysis"), "analysis"),
        analyte=analyte,
        faults=tuple(faults),
        action_durations={str(k): float(v) for k, v in (d.get("action_durations") or {}).items()},
        replicates=replicates,
        seed=int(d.get("seed", 42)),
        max_time_s=float(d.get("max_time_s", 5000.0)),
    )
