"""The Summarizer: anomaly audit, analysis and the eleven-module report.

The datastore is the only source of measured data.  The plan supplies the
instruction, subtasks and data requirements; the transition history supplies
the state-machine evolution; the scenario configuration supplies nominal
reference values for the deviation columns.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .analysis import (
    AcidBaseSystem,
    AnalysisResult,
    StddevSummary,
    TitrationCurve,
    analyze_curve,
    color_transition,
    common_grid,
    curve_from_store,
    derivative,
    resample_uniform,
    stddev_vs_theory,
)
from .chemistry import AcidSpec, titration_curve
from .config import AnalysisConfig, ScenarioConfig
from .fsm import TransitionRecord
from .fusion import DATA_QUALITY, DIVERGENCE, Datastore
from .protocol import TaskPlan, canonical_json

REPORT_MODULES = (
    "experiment_metadata",
    "experimental_parameters",
    "operational_procedure",
    "state_machine_evolution",
    "process_data",
    "chemical_quantity_records",
    "key_event_logs",
    "anomaly_records",
    "experimental_results",
    "visual_documentation",
    "reproducibility_guide",
)
CHART_FILES = ("curve.csv", "d1.csv", "d2.csv", "zoom.csv")

# datastore quantities that satisfy each parsed data requirement
_REQUIREMENT_ROWS = {
    ("temperature", "start_and_end"): ("temperature_start", "temperature_end"),
    ("mass", "at_target"): ("mass",),
}
_CONTINUOUS = ("per_drop", "1 Hz")

RESPONSES = {
    "audio_timeout": "controller reset: gripper retracted and dispensing retried",
    "droplet_failure": "controller reset: gripper retracted and dispensing retried",
    "unexpected_droplet": "droplet excluded from fusion and logged",
    "sensor_timeout": "dispensing held until pH readings resumed",
    DATA_QUALITY: "window value discarded (null fused record)",
    DIVERGENCE: "fused value kept and flagged for review",
    "controller_escalation": "escalated to the Planner; run aborted",
    "endpoint_unconfirmed": "escalated to the Planner; run aborted",
    "endpoint_unverified": "escalated to the Planner; run aborted",
    "endpoint_overshoot": "escalated to the Planner; run aborted",
    "mass_overshoot": "escalated to the Planner; run aborted",
    "undefined_transition": "escalated to the Planner; run aborted",
    "action_failed": "escalated to the Planner; run aborted",
    "run_timeout": "run stopped at the simulated time limit",
}
_ABORTING = {code for code, text in RESPONSES.items() if "aborted" in text or "time limit" in text}


class IncompleteRun(ValueError):
    def __init__(self, requirement: str, detail: str = ""):
        super().__init__(f"unmet data requirement {requirement!r}" + (f": {detail}" if detail else ""))
        self.requirement = requirement


@dataclass
class RunAnalysis:
    """Analysis products for one run, whatever its kind."""

    kind: str
    curve: TitrationCurve | None = None
    result: AnalysisResult | None = None
    transition_volume: float | None = None
    charts: dict[str, str] = field(default_factory=dict)


def _last_value(store: Datastore, quantity: str) -> float | None:
    for r in reversed(store.records):
        if r.quantity == quantity and r.value is not None:
            return float(r.value)
    return None


def check_requirements(store: Datastore, plan: TaskPlan, completed: bool) -> None:
    """Raise :class:`IncompleteRun` for the first data requirement not found in the datastore.

    An aborted run is only held to its continuous requirements (per drop and
    periodic series); end-of-run items cannot exist for it.
    """
    present = {r.quantity for r in store if r.value is not None}
    for req in plan.parsed_instruction.data_requirements:
        q, freq = req["quantity"], req.get("frequency", "")
        if not completed and freq not in _CONTINUOUS:
            continue
        needed = _REQUIREMENT_ROWS.get((q, freq), (q,))
        for name in needed:
            if name not in present:
                raise IncompleteRun(q, f"no {name!r} rows in the datastore")


# ---------------------------------------------------------------- charts


def _csv(header: Sequence[str], columns: Sequence[Sequence[float]]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*columns):
        buf.write(",".join(f"{float(x):.6f}" for x in row) + "\n")
    return buf.getvalue()


def _chart_data(curve: TitrationCurve, res: AnalysisResult | None, label: str, zoom_half: float,
                step: float) -> dict[str, str]:
    if res is None:
        uni = resample_uniform(curve, step)
        grid, smooth = uni.volumes, uni.values
        d1 = derivative(grid, smooth, 1)
        d2 = derivative(grid, smooth, 2)
    else:
        grid, d1, d2 = res.grid, res.d1, res.d2
    if res is not None and res.equivalence_points:
        centre = max(res.equivalence_points, key=lambda p: p.peak_height).volume
    else:
        centre = float(grid[int(np.argmax(d1))])
    near = np.abs(curve.volumes - centre) <= zoom_half + 1e-9
    d1_name = "dpH_dV" if label == "pH" else f"d{label}_dV"
    d2_name = "d2pH_dV2" if label == "pH" else f"d2{label}_dV2"
    return {
        "curve.csv": _csv(("V_mL", label), (curve.volumes, curve.values)),
        "d1.csv": _csv(("V_mL", d1_name), (grid, d1)),
        "d2.csv": _csv(("V_mL", d2_name), (grid, d2)),
        "zoom.csv": _csv(("V_mL", label), (curve.volumes[near], curve.values[near])),
    }


def acid_base_system(plan: TaskPlan, cfg: ScenarioConfig | None) -> AcidBaseSystem | None:
    init = plan.parsed_instruction.initial_parameters
    if cfg is None or cfg.analyte is None or "concentration" not in init:
        return None
    return AcidBaseSystem(float(init["concentration"][0]), cfg.analyte.volume_ml,
                          float(init["titrant_concentration"][0]))


def analyze_run(store: Datastore, plan: TaskPlan, cfg: ScenarioConfig | None = None) -> RunAnalysis:
    kind = plan.parsed_instruction.kind
    acfg = cfg.analysis if cfg is not None else AnalysisConfig()
    if kind == "weigh_and_dissolve":
        return RunAnalysis(kind)
    quantity = "color" if kind == "titrate_to_color" else "pH"
    curve = curve_from_store(store, quantity)
    out = RunAnalysis(kind, curve)
    if len(curve) < max(4, acfg.sg_window):
        return out
    if kind == "titrate_to_ph":
        out.result = analyze_curve(curve, acfg.resample_step_ml, acfg.sg_window, acfg.sg_order,
                                   acfg.prominence_factor, acfg.min_separation_ml, acid_base_system(plan, cfg))
        out.charts = _chart_data(curve, out.result, "pH", acfg.zoom_half_width_ml, acfg.resample_step_ml)
    else:
        out.transition_volume = color_transition(store, quantity)
        out.charts = _chart_data(curve, None, "color_code", acfg.zoom_half_width_ml, acfg.resample_step_ml)
    return out


# ---------------------------------------------------------------- modules


def _anomaly_audit(store: Datastore, accepted: bool) -> list[dict[str, Any]]:
    entries = []
    increments = [r for r in store if r.quantity in ("volume", "mass") and r.value is not None]
    for r in store:
        if not r.anomalies:
            continue
        for code in r.anomalies:
            if r.quantity != "anomaly" and code not in (DATA_QUALITY, DIVERGENCE):
                continue  # already listed from its own anomaly row
            later = any(x.timestamp > r.timestamp for x in increments)
            if code in _ABORTING:
                status = "unresolved"
            elif accepted or later:
                status = "resolved"
            else:
                status = "unresolved"
            entries.append({
                "type": code,
                "timestamp": r.timestamp,
                "state": r.state,
                "subtask": r.subtask,
                "response": RESPONSES.get(code, "logged"),
                "resolution": status,
            })
    return entries


def _transition_summary(history: Sequence[TransitionRecord]) -> dict[str, Any]:
    first_entry: dict[str, float] = {}
    counts: dict[str, int] = {}
    for h in history:
        first_entry.setdefault(h.target, h.timestamp)
        counts[h.symbol] = counts.get(h.symbol, 0) + 1
    return {
        "transition_count": len(history),
        "symbol_counts": counts,
        "key_state_changes": [{"state": s, "first_entered": t} for s, t in first_entry.items()],
        "history": [h.to_dict() for h in history],
    }


_REPETITIVE = {"sigma_audio_detect", "sigma_stable", "sigma_record", "sigma_pour"}


def _key_events(history: Sequence[TransitionRecord], store: Datastore) -> list[dict[str, Any]]:
    events = []
    drops = [h.timestamp for h in history if h.symbol == "sigma_audio_detect"]
    for h in history:
        if h.symbol in _REPETITIVE and not (h.symbol == "sigma_record" and h.source != h.target):
            continue
        events.append({"timestamp": h.timestamp, "event": f"{h.symbol} fired", "from": h.source, "to": h.target,
                       "emitter": h.emitter})
    if drops:
        events.append({"timestamp": drops[0], "event": "first droplet detected", "count": 1})
        events.append({"timestamp": drops[-1], "event": "last droplet detected", "count": len(drops)})
    for r in store:
        if r.quantity in ("temperature_start", "temperature_end", "dissolution", "mass"):
            events.append({"timestamp": r.timestamp, "event": f"{r.quantity} recorded", "value": r.value})
    events.sort(key=lambda e: (e["timestamp"], e["event"]))
    return events


def _snapshot(store: Datastore, t: float, label: str, state: str) -> dict[str, Any]:
    latest: dict[str, Any] = {}
    for r in store:
        if r.timestamp > t:
            break
        if r.value is not None and r.quantity not in ("volume", "anomaly"):
            latest[r.quantity] = r.value
    return {"label": label, "timestamp": t, "state": state, "readings": dict(sorted(latest.items()))}


def _quantity_records(store: Datastore, quantity: str) -> dict[str, Any]:
    fused = [r for r in store if r.quantity == quantity]
    totals = {"audio": 0.0, "stat": 0.0}
    gammas: dict[str, list[float]] = {"audio": [], "stat": [], "sensor": []}
    for r in fused:
        for ch, raw in r.raw.items():
            if ch in totals:
                totals[ch] += float(raw["value"])
            if ch in gammas:
                gammas[ch].append(float(raw["confidence_raw"]))
    good = [r for r in fused if r.value is not None]
    unit = "g" if quantity == "mass" else "mL"
    out = {
        "unit": unit,
        "fused_records": len(fused),
        "null_records": len(fused) - len(good),
        "divergence_flags": sum(DIVERGENCE in r.anomalies for r in fused),
        "Q_fused": float(sum(r.value for r in good)),
        "gamma_fused_mean": float(np.mean([r.confidence for r in good])) if good else 0.0,
    }
    if gammas["audio"]:
        out["Q_audio"] = totals["audio"]
        out["gamma_audio_mean"] = float(np.mean(gammas["audio"]))
    if gammas["stat"]:
        out["Q_stat"] = totals["stat"]
        out["gamma_stat_mean"] = float(np.mean(gammas["stat"]))
    if gammas["sensor"]:
        out["gamma_sensor_mean"] = float(np.mean(gammas["sensor"]))
    return out


def _series_summary(store: Datastore, quantity: str) -> dict[str, Any] | None:
    rows = [r for r in store if r.quantity == quantity and r.value is not None]
    if not rows:
        return None
    vals = [float(r.value) for r in rows]
    return {"points": len(rows), "t_start": rows[0].timestamp, "t_end": rows[-1].timestamp,
            "min": min(vals), "max": max(vals)}


def _relative(measured: float | None, reference: float | None) -> float | None:
    if measured is None or reference is None or reference == 0:
        return None
    return (measured - reference) / reference


def _results(analysis: RunAnalysis, store: Datastore, plan: TaskPlan, cfg: ScenarioConfig | None) -> dict[str, Any]:
    parsed = plan.parsed_instruction
    init = parsed.initial_parameters
    target = {k: v[0] for k, v in parsed.target_parameters.items()}
    if analysis.kind == "weigh_and_dissolve":
        mass = _last_value(store, "mass")
        tgt = target.get("mass")
        balance = None
        for r in store:
            if r.quantity == "mass" and "sensor" in r.raw:
                balance = float(r.raw["sensor"]["value"])
        return {
            "target_mass_g": tgt,
            "recorded_mass_g": mass,
            "balance_reading_g": balance,
            "mass_error_g": None if mass is None or tgt is None else abs(mass - tgt),
            "dissolved": _last_value(store, "dissolution") == 1.0,
        }
    if analysis.kind == "titrate_to_color":
        v = analysis.transition_volume
        c_t = float(init["titrant_concentration"][0])
        c_ref = float(init["concentration"][0])
        v_ca = float(init["volume"][0])
        conc = None if v is None else c_t * v / v_ca
        v_theory = c_ref * v_ca / c_t
        return {
            "endpoint_color": "sapphire" if v is not None else None,
            "transition_volume_mL": v,
            "theoretical_volume_mL": v_theory,
            "total_volume_mL": _last_value(store, "volume_total"),
            "analyte_concentration_M": conc,
            "nominal_concentration_M": c_ref,
            "relative_deviation": _relative(conc, c_ref),
        }
    res = analysis.result
    system = acid_base_system(plan, cfg)
    eq_points, pka = [], []
    ref_pka = list(cfg.analyte.pka) if cfg is not None and cfg.analyte is not None else []
    if res is not None:
        for k, p in enumerate(res.equivalence_points, start=1):
            theory = None
            if system is not None:
                theory = k * system.analyte_conc * system.analyte_volume_ml / system.titrant_conc
            eq_points.append({"index": k, "volume_mL": p.volume, "pH": p.value, "d1_peak_mL": p.peak_volume,
                              "d1_peak_height": p.peak_height, "refined_by_d2": bool(p.refined),
                              "theoretical_volume_mL": theory, "relative_deviation": _relative(p.volume, theory)})
        for e in res.pka:
            ref = ref_pka[e.index - 1] if e.applicable and e.index - 1 < len(ref_pka) else None
            pka.append({"index": e.index, "v_half_mL": e.v_half, "pH_at_half": e.ph_half, "pKa": e.pka,
                        "applicable": e.applicable, "method": e.method, "reference_pKa": ref,
                        "relative_deviation": _relative(e.pka, ref)})
    return {
        "final_pH": _last_value(store, "pH"),
        "target_pH": target.get("pH"),
        "total_volume_mL": _last_value(store, "volume_total"),
        "equivalence_points": eq_points,
        "pKa": pka,
    }


def generate_report(
    store: Datastore,
    plan: TaskPlan,
    history: Sequence[TransitionRecord],
    analysis: RunAnalysis,
    cfg: ScenarioConfig | None = None,
    seed: int | None = None,
    status: str = "accepted",
) -> dict[str, Any]:
    """Assemble the eleven report modules.

    Raises
    ------
    IncompleteRun
        A data requirement of the instruction has no rows in the datastore.
    """
    accepted = bool(history) and history[-1].target in plan.state_machine.accepting
    check_requirements(store, plan, accepted)
    parsed = plan.parsed_instruction
    t_end = store.records[-1].timestamp if store.records else 0.0
    fired = {}
    for h in history:
        fired.setdefault(h.symbol, []).append(h.timestamp)

    procedure = []
    for s in plan.subtasks:
        times = fired.get(s.input_symbol or "", [])
        procedure.append({
            "id": s.id,
            "agent": s.receiver.value,
            "description": s.description,
            "depends_on": list(plan.dependencies.get(s.id, [])),
            "input_symbol": s.input_symbol,
            "resulting_state": s.resulting_state,
            "first_fired": times[0] if times else None,
            "last_fired": times[-1] if times else None,
            "times_fired": len(times),
        })

    anomalies = _anomaly_audit(store, accepted)
    snapshots = [_snapshot(store, 0.0 if not history else history[0].timestamp, "initial state", plan.state_machine.initial)]
    for h in history:
        if h.symbol in ("sigma_endpoint", "sigma_target_mass"):
            snapshots.append(_snapshot(store, h.timestamp, "endpoint arrival", h.target))
    for a in anomalies:
        if a["type"] not in (DATA_QUALITY, DIVERGENCE):
            snapshots.append(_snapshot(store, a["timestamp"], f"anomaly: {a['type']}", a["state"]))
    snapshots.append(_snapshot(store, t_end, "final state", history[-1].target if history else plan.state_machine.initial))

    quantity = "mass" if parsed.kind == "weigh_and_dissolve" else "volume"
    series = {}
    for name in ("pH_trace", "pH", "color", "color_trace", "balance_trace", "volume_total", "temperature"):
        summary = _series_summary(store, name)
        if summary is not None:
            series[name] = summary

    params: dict[str, Any] = {
        "initial_conditions": {k: {"value": v[0], "unit": v[1]} for k, v in parsed.initial_parameters.items()},
        "target_conditions": {k: {"value": v[0], "unit": v[1]} for k, v in parsed.target_parameters.items()},
        "chemical_system": parsed.chemical_system,
    }
    if cfg is not None and cfg.analyte is not None:
        params["initial_conditions"]["analyte_volume"] = {"value": cfg.analyte.volume_ml, "unit": "mL"}
    baseline = _first_value(store, "pH") if parsed.kind == "titrate_to_ph" else None
    if baseline is not None:
        params["initial_conditions"]["measured_initial_pH"] = {"value": baseline, "unit": "pH"}
    t_start = _first_value(store, "temperature_start")
    t_stop = _last_value(store, "temperature_end")
    params["temperature"] = {"start_degC": t_start, "end_degC": t_stop}

    report = {
        "experiment_metadata": {
            "scenario": cfg.name if cfg is not None else None,
            "seed": seed,
            "status": status,
            "instruction": " ".join(_instruction(cfg, parsed)),
            "simulated_start_s": history[0].timestamp if history else 0.0,
            "simulated_end_s": t_end,
            "operator": "rule-based agents (simulation)",
            "reagent_batches": {name: "simulated" for name in parsed.reagents},
        },
        "experimental_parameters": params,
        "operational_procedure": {"subtasks": procedure, "dependencies": {k: list(v) for k, v in plan.dependencies.items()}},
        "state_machine_evolution": _transition_summary(history),
        "process_data": {"series": series, "charts": list(CHART_FILES) if analysis.charts else []},
        "chemical_quantity_records": _quantity_records(store, quantity),
        "key_event_logs": _key_events(history, store),
        "anomaly_records": {"count": len(anomalies), "entries": anomalies,
                            "summary": "none" if not anomalies else _anomaly_summary(anomalies)},
        "experimental_results": _results(analysis, store, plan, cfg),
        "visual_documentation": {"kind": "simulator state snapshots", "snapshots": snapshots},
        "reproducibility_guide": _repro(plan, cfg, seed),
    }
    assert tuple(report) == REPORT_MODULES
    return report


def _first_value(store: Datastore, quantity: str) -> float | None:
    for r in store:
        if r.quantity == quantity and r.value is not None:
            return float(r.value)
    return None


def _instruction(cfg: ScenarioConfig | None, parsed) -> list[str]:
    return [cfg.instruction] if cfg is not None else [parsed.chemical_system]


def _anomaly_summary(entries: Sequence[Mapping[str, Any]]) -> str:
    counts: dict[str, int] = {}
    for e in entries:
        counts[e["type"]] = counts.get(e["type"], 0) + 1
    unresolved = sum(e["resolution"] == "unresolved" for e in entries)
    parts = [f"{k} x{v}" for k, v in counts.items()]
    return f"{len(entries)} anomalies ({', '.join(parts)}); {unresolved} unresolved"


def _repro(plan: TaskPlan, cfg: ScenarioConfig | None, seed: int | None) -> dict[str, Any]:
    steps = [f"{s.id} ({s.receiver.value}): {s.description}" for s in plan.subtasks]
    out: dict[str, Any] = {"steps": steps, "seed": seed}
    if cfg is not None:
        out["command"] = f"chemloop --scenario {cfg.name} --seed {seed}"
        out["configuration"] = {
            "plant": _plain(cfg.plant.__dict__),
            "controller": dict(cfg.controller),
            "supervision": _plain(cfg.supervision.__dict__),
            "fusion": _plain(cfg.fusion.__dict__),
            "analysis": _plain(cfg.analysis.__dict__),
            "faults": [{"name": f.name, "kind": f.kind, "window": list(f.window), "enabled_by_default": on}
                       for f, on in cfg.faults],
        }
    return out


def _plain(d: Mapping[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------- markdown


def _fmt(x: Any, nd: int = 4) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.{nd}g}" if abs(x) < 1e-3 and x != 0 else f"{x:.{nd}f}".rstrip("0").rstrip(".")
    return str(x)


def render_markdown(report: Mapping[str, Any]) -> str:
    meta = report["experiment_metadata"]
    lines = [f"# Experiment report: {meta['scenario']}", ""]
    lines += ["## Experiment metadata", "",
              f"- Status: {meta['status']}",
              f"- Seed: {meta['seed']}",
              f"- Simulated time: {_fmt(meta['simulated_start_s'])} s to {_fmt(meta['simulated_end_s'])} s",
              f"- Operator: {meta['operator']}",
              f"- Instruction: {meta['instruction']}", ""]
    p = report["experimental_parameters"]
    lines += ["## Experimental parameters", "", f"- Chemical system: {p['chemical_system']}"]
    for k, v in p["initial_conditions"].items():
        lines.append(f"- Initial {k}: {_fmt(v['value'])} {v['unit']}")
    for k, v in p["target_conditions"].items():
        lines.append(f"- Target {k}: {_fmt(v['value'])} {v['unit']}")
    lines += [f"- Temperature: start {_fmt(p['temperature']['start_degC'])} degC, "
              f"end {_fmt(p['temperature']['end_degC'])} degC", ""]
    lines += ["## Operational procedure", "", "| subtask | agent | description | depends on | fired |",
              "|---|---|---|---|---|"]
    for s in report["operational_procedure"]["subtasks"]:
        lines.append(f"| {s['id']} | {s['agent']} | {s['description']} | {', '.join(s['depends_on']) or '-'} "
                     f"| {s['times_fired']} |")
    sm = report["state_machine_evolution"]
    lines += ["", "## State machine evolution", "", f"- Transitions: {sm['transition_count']}"]
    for k in sm["key_state_changes"]:
        lines.append(f"- {k['state']} first entered at {_fmt(k['first_entered'])} s")
    lines += ["", "## Process data", ""]
    for name, s in report["process_data"]["series"].items():
        lines.append(f"- {name}: {s['points']} points, {_fmt(s['t_start'])}-{_fmt(s['t_end'])} s, "
                     f"range {_fmt(s['min'])} to {_fmt(s['max'])}")
    if report["process_data"]["charts"]:
        lines.append(f"- Chart data: {', '.join(report['process_data']['charts'])}")
    q = report["chemical_quantity_records"]
    lines += ["", "## Chemical quantity records", ""]
    for k, v in q.items():
        lines.append(f"- {k}: {_fmt(v)}")
    lines += ["", "## Key event logs", ""]
    for e in report["key_event_logs"]:
        lines.append(f"- {_fmt(e['timestamp'])} s: {e['event']}")
    a = report["anomaly_records"]
    lines += ["", "## Anomaly records", "", f"- Summary: {a['summary']}"]
    for e in a["entries"]:
        lines.append(f"- {_fmt(e['timestamp'])} s {e['type']} in {e['state']}: {e['response']} ({e['resolution']})")
    lines += ["", "## Experimental results", ""]
    for k, v in report["experimental_results"].items():
        if isinstance(v, list):
            for item in v:
                lines.append(f"- {k} {item.get('index', '')}: " + ", ".join(
                    f"{kk} {_fmt(vv)}" for kk, vv in item.items() if kk != "index"))
        else:
            lines.append(f"- {k}: {_fmt(v)}")
    lines += ["", "## Visual documentation", ""]
    for s in report["visual_documentation"]["snapshots"]:
        readings = ", ".join(f"{k} {_fmt(v)}" for k, v in s["readings"].items())
        lines.append(f"- {s['label']} at {_fmt(s['timestamp'])} s ({s['state']}): {readings or 'no readings'}")
    r = report["reproducibility_guide"]
    lines += ["", "## Reproducibility guide", ""]
    if "command" in r:
        lines.append(f"- Command: `{r['command']}`")
    lines += [f"- {s}" for s in r["steps"]]
    return "\n".join(lines) + "\n"


def report_json(report: Mapping[str, Any]) -> str:
    return canonical_json(report, indent=2) + "\n"


# ---------------------------------------------------------------- replicates


@dataclass
class ReplicateStudy:
    seeds: list[int]
    summary: StddevSummary
    theory: np.ndarray
    v_eq: list[float]

    def to_csv(self) -> str:
        return _csv(("V_mL", "sigma_pH", "theory_pH"), (self.summary.volumes, self.summary.sigma, self.theory))

    def to_dict(self) -> dict[str, Any]:
        s = self.summary
        return {
            "seeds": list(self.seeds),
            "theoretical_equivalence_mL": list(self.v_eq),
            "plateau_rms": s.plateau_rms,
            "plateau_min": s.plateau_min,
            "plateau_max": s.plateau_max,
            "transition_max": s.transition_max,
            "transition_at_mL": s.transition_at,
            "dominance": s.dominance,
        }


def replicate_study(curves: Sequence[TitrationCurve], seeds: Sequence[int], plan: TaskPlan,
                    cfg: ScenarioConfig) -> ReplicateStudy:
    """Standard deviation of measured minus theoretical pH across replicate runs."""
    system = acid_base_system(plan, cfg)
    if system is None or cfg.analyte is None:
        raise ValueError("replicate study needs a pH titration with an analyte block")
    step = cfg.analysis.resample_step_ml
    grid = common_grid(curves, step)
    on_grid = [TitrationCurve(grid, np.interp(grid, c.volumes, c.values), c.metadata) for c in curves]
    a = cfg.analyte
    spec = AcidSpec(a.name, a.kind, a.pka, system.analyte_conc, a.volume_ml * 1e-3)
    theory = np.array([ph for _, ph in titration_curve(spec, system.titrant_conc, grid)])
    n_protons = max(1, len(a.pka)) if a.kind != "strong" else 1
    v_eq = [k * system.analyte_conc * system.analyte_volume_ml / system.titrant_conc
            for k in range(1, n_protons + 1)]
    summary = stddev_vs_theory(on_grid, theory, v_eq, cfg.analysis.exclusion_half_width_ml)
    return ReplicateStudy(list(seeds), summary, theory, v_eq)
