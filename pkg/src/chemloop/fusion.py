"""Confidence-gated fusion of quantity estimates and the experiment datastore.

Each observation window yields one :class:`FusedRecord`.  Channels are first
gated against the execution state (a nonzero increment reported while the
machine is in a state with no physical operation is impossible, so its
confidence drops to zero) and against the anomaly log (confidence is scaled
by ``attenuation``).  Channels below ``threshold`` are discarded; the rest
are averaged with weights proportional to confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .protocol import canonical_json

CHANNELS = ("audio", "stat", "visual", "sensor")
DATA_QUALITY = "data_quality"
DIVERGENCE = "divergence"


class TimestampRegression(ValueError):
    pass


@dataclass(frozen=True)
class ObservationChannel:
    id: str
    value: float
    confidence_raw: float
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_raw <= 1.0:
            raise ValueError(f"raw confidence must lie in [0, 1], got {self.confidence_raw}")


@dataclass(frozen=True)
class FusionConfig:
    threshold: float = 0.6
    attenuation: float = 0.1
    divergence_fraction: float = 0.10
    divergence_floor: float = 0.046875

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError("attenuation must lie in [0, 1]")


def gate_confidence(
    channel: ObservationChannel,
    no_operation: bool,
    anomalous: bool,
    config: FusionConfig = FusionConfig(),
) -> float:
    """State-consistency and anomaly gating of one channel's confidence.

    Parameters
    ----------
    channel : ObservationChannel
    no_operation : bool
        True when the current state performs no physical operation.
    anomalous : bool
        True when an execution anomaly overlaps the channel's time window.
    """
    if no_operation and channel.value != 0:
        return 0.0
    if anomalous:
        return channel.confidence_raw * config.attenuation
    return channel.confidence_raw


@dataclass(frozen=True)
class FusionResult:
    value: float | None
    confidence: float
    weights: dict[str, float]
    anomalies: tuple[str, ...] = ()


def fuse(
    channels: Sequence[tuple[str, float, float]], config: FusionConfig = FusionConfig()
) -> FusionResult:
    """Fuse already-gated ``(id, value, gamma)`` triples.

    Returns a null value with confidence 0 and a data-quality anomaly when no
    channel reaches the threshold.
    """
    included = [(cid, v, g) for cid, v, g in channels if g >= config.threshold]
    if not included:
        return FusionResult(None, 0.0, {}, (DATA_QUALITY,))
    total = sum(g for _, _, g in included)
    weights = {cid: g / total for cid, _, g in included}
    value = sum(weights[cid] * v for cid, v, _ in included)
    values = [v for _, v, _ in included]
    lo, hi = min(values), max(values)
    # guard against the last-ulp drift of the weighted sum
    value = min(max(value, lo), hi)
    confidence = total / len(included)
    flags: tuple[str, ...] = ()
    if hi - lo > config.divergence_fraction * max(abs(value), config.divergence_floor):
        flags = (DIVERGENCE,)
    return FusionResult(value, confidence, weights, flags)


@dataclass(frozen=True)
class FusedRecord:
    timestamp: float
    quantity: str
    value: float | None
    confidence: float
    raw: Mapping[str, Mapping[str, float]]
    state: str
    subtask: str
    anomalies: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if (self.value is None) != (self.confidence == 0.0) and self.quantity != "anomaly":
            raise ValueError("a null value must carry zero confidence and vice versa")

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "quantity": self.quantity,
            "value": self.value,
            "confidence": self.confidence,
            "raw": {k: dict(v) for k, v in self.raw.items()},
            "state": self.state,
            "subtask": self.subtask,
            "anomalies": list(self.anomalies),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FusedRecord":
        return cls(
            float(d["timestamp"]),
            d["quantity"],
            None if d["value"] is None else d["value"],
            float(d["confidence"]),
            d.get("raw", {}),
            d["state"],
            d["subtask"],
            tuple(d.get("anomalies", [])),
        )


@dataclass
class Datastore:
    records: list[FusedRecord] = field(default_factory=list)

    def record(self, rec: FusedRecord) -> FusedRecord:
        if self.records and rec.timestamp < self.records[-1].timestamp:
            raise TimestampRegression(
                f"record at {rec.timestamp} precedes tail at {self.records[-1].timestamp}"
            )
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def select(self, quantity: str) -> list[FusedRecord]:
        return [r for r in self.records if r.quantity == quantity]

    def anomalies(self) -> list[FusedRecord]:
        return [r for r in self.records if r.anomalies]

    def to_jsonl(self) -> str:
        return "".join(canonical_json(r.to_dict()) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "Datastore":
        import json

        store = cls()
        for line in text.splitlines():
            if line.strip():
                store.records.append(FusedRecord.from_dict(json.loads(line)))
        return store


def smooth_single_source(
    series: Sequence[tuple[float, float]], window: int = 21, m: float = 5.0
) -> list[tuple[float, float, str]]:
    """Median-absolute-deviation outlier replacement over a trailing window.

    Returns ``(t, value, label)`` triples where ``label`` is ``"high"`` for
    points that pass and ``"low"`` for points replaced by the window median.
    The MAD is floored at a small fraction of the window's scale so that a
    perfectly flat window does not flag rounding noise.
    """
    ts = [t for t, _ in series]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("timestamps must be ascending")
    vals = np.asarray([v for _, v in series], dtype=float)
    out: list[tuple[float, float, str]] = []
    for i, (t, v) in enumerate(series):
        lo = max(0, i - window + 1)
        w = vals[lo : i + 1]
        if len(w) < 3:
            out.append((t, float(v), "high"))
            continue
        med = float(np.median(w))
        mad = float(np.median(np.abs(w - med)))
        floor = 1e-9 * max(1.0, abs(med))
        if abs(v - med) > m * 1.4826 * max(mad, floor):
            out.append((t, med, "low"))
        else:
            out.append((t, float(v), "high"))
    return out


@dataclass
class _Window:
    stat: float = 0.0
    stat_gamma: float | None = None
    audio: float = 0.0
    audio_gammas: list[float] = field(default_factory=list)
    sensor: float | None = None
    sensor_gamma: float | None = None
    visual: float | None = None
    visual_gamma: float | None = None
    anomalies: list[str] = field(default_factory=list)
    opened: float | None = None

    def empty(self) -> bool:
        return self.stat == 0.0 and not self.audio_gammas and self.sensor is None and self.visual is None


class Recorder:
    """Windowed fusion of dispensed-quantity estimates into the datastore.

    Parameters
    ----------
    config : FusionConfig
    operation_states : set of str
        States in which physical dispensing happens; a nonzero increment
        reported in any other state is gated to zero confidence.
    audio_baseline : float
        Raw audio confidence reported for a window without any event.
    quantity, unit : str
        Name of the fused increment (``"volume"`` in mL or ``"mass"`` in g).
    """

    def __init__(
        self,
        config: FusionConfig,
        operation_states: Iterable[str],
        audio_baseline: float = 0.5,
        quantity: str = "volume",
        use_audio: bool = True,
    ):
        self.config = config
        self.operation_states = frozenset(operation_states)
        self.audio_baseline = audio_baseline
        self.quantity = quantity
        self.use_audio = use_audio
        self.store = Datastore()
        self.total = 0.0
        self.window = _Window()
        self.null_windows = 0

    # ---- inputs

    def add_stat(self, t: float, delta: float, gamma: float) -> None:
        if self.window.opened is None:
            self.window.opened = t
        self.window.stat += delta
        self.window.stat_gamma = gamma

    def add_audio(self, t: float, value: float, clarity: float) -> None:
        if self.window.opened is None:
            self.window.opened = t
        self.window.audio += value
        self.window.audio_gammas.append(clarity)

    def add_sensor(self, t: float, value: float, gamma: float) -> None:
        self.window.sensor = value
        self.window.sensor_gamma = gamma

    def add_anomaly(self, code: str) -> None:
        self.window.anomalies.append(code)

    # ---- outputs

    def flush(self, t: float, state: str, subtask: str) -> FusedRecord | None:
        """Fuse the open window into a record and reset it."""
        w = self.window
        if w.empty() and not w.anomalies:
            return None
        no_op = state not in self.operation_states
        anomalous = bool(w.anomalies)
        chans: list[ObservationChannel] = []
        if w.stat_gamma is not None or w.stat != 0.0:
            chans.append(ObservationChannel("stat", w.stat, w.stat_gamma if w.stat_gamma is not None else 0.9, t))
        if self.use_audio:
            g = float(np.clip(np.mean(w.audio_gammas), 0.0, 1.0)) if w.audio_gammas else self.audio_baseline
            chans.append(ObservationChannel("audio", w.audio, g, t))
        if w.sensor is not None:
            chans.append(ObservationChannel("sensor", w.sensor, w.sensor_gamma or 0.0, t))
        if w.visual is not None:
            chans.append(ObservationChannel("visual", w.visual, w.visual_gamma or 0.0, t))
        gated = [(c.id, c.value, gate_confidence(c, no_op, anomalous, self.config)) for c in chans]
        res = fuse(gated, self.config)
        raw = {
            c.id: {"value": c.value, "confidence_raw": c.confidence_raw, "confidence_gated": g}
            for c, (_, _, g) in zip(chans, gated)
        }
        flags = tuple(dict.fromkeys([*w.anomalies, *res.anomalies]))
        rec = FusedRecord(t, self.quantity, res.value, res.confidence, raw, state, subtask, flags)
        self.store.record(rec)
        if res.value is None:
            self.null_windows += 1
        else:
            self.total += res.value
        self.window = _Window()
        return rec

    def write(
        self,
        t: float,
        quantity: str,
        value: float | None,
        confidence: float,
        state: str,
        subtask: str,
        raw: Mapping[str, Mapping[str, float]] | None = None,
        anomalies: Iterable[str] = (),
    ) -> FusedRecord:
        rec = FusedRecord(t, quantity, value, confidence, raw or {}, state, subtask, tuple(anomalies))
        return self.store.record(rec)

    def write_anomaly(self, t: float, code: str, state: str, subtask: str) -> FusedRecord:
        return self.write(t, "anomaly", None, 0.0, state, subtask, {}, (code,))
