from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chemloop.fusion import (
    DATA_QUALITY,
    DIVERGENCE,
    Datastore,
    FusedRecord,
    FusionConfig,
    ObservationChannel,
    Recorder,
    TimestampRegression,
    fuse,
    gate_confidence,
    smooth_single_source,
)

from . import fusion_properties as fp


def test_stat_in_waiting_state_gated_to_zero():
    ch = ObservationChannel("stat", 0.047, 0.9)
    assert gate_confidence(ch, no_operation=True, anomalous=False) == 0.0


def test_anomaly_attenuation_example():
    ch = ObservationChannel("audio", 0.047, 0.8)
    assert gate_confidence(ch, no_operation=False, anomalous=True) == pytest.approx(0.08, rel=1e-15)


def test_zero_value_consistent_in_no_operation_state():
    ch = ObservationChannel("stat", 0.0, 0.9)
    assert gate_confidence(ch, no_operation=True, anomalous=False) == 0.9


def test_two_channel_fusion_hand_values():
    # (0.8 * 0.047 + 0.9 * 0.046) / 1.7 by hand
    res = fuse([("audio", 0.047, 0.8), ("stat", 0.046, 0.9)])
    assert res.value == pytest.approx(0.0464706, abs=5e-8)
    assert res.confidence == pytest.approx(0.85, abs=1e-15)
    assert res.weights["audio"] == pytest.approx(0.470588, abs=5e-7)
    assert res.weights["stat"] == pytest.approx(0.529412, abs=5e-7)
    assert res.anomalies == ()


def test_single_channel():
    res = fuse([("stat", 0.05, 0.9)])
    assert (res.value, res.confidence) == (0.05, 0.9)


def test_all_below_threshold():
    res = fuse([("audio", 0.05, 0.5), ("stat", 0.05, 0.5)])
    assert res.value is None and res.confidence == 0.0 and res.anomalies == (DATA_QUALITY,)


def test_divergence_flag():
    res = fuse([("audio", 0.0469, 0.8), ("stat", 0.7969, 0.9)])
    assert DIVERGENCE in res.anomalies


def _rec(t, value=0.05, conf=0.9, anomalies=()):
    return FusedRecord(t, "volume", value, conf, {}, "q4_titrating", "t6", anomalies)


def test_record_append_and_regression():
    store = Datastore()
    store.record(_rec(1.0))
    assert len(store) == 1
    with pytest.raises(TimestampRegression):
        store.record(_rec(0.5))


def test_null_record_carries_data_quality_flag():
    rec = Recorder(FusionConfig(), {"q4_titrating"})
    rec.add_stat(1.0, 0.05, 0.5)
    out = rec.flush(1.0, "q4_titrating", "t6")
    assert out.value is None and DATA_QUALITY in out.anomalies and out.confidence == 0.0


def test_recorder_gates_stat_outside_operation():
    rec = Recorder(FusionConfig(), {"q4_titrating"})
    rec.add_stat(1.0, 0.046, 0.9)
    rec.add_audio(1.0, 0.046875, 0.8)
    out = rec.flush(1.0, "q5_waiting_stable", "t6")
    assert out.raw["stat"]["confidence_gated"] == 0.0
    assert out.raw["audio"]["confidence_gated"] == 0.0
    assert out.value is None


def test_null_value_requires_zero_confidence():
    with pytest.raises(ValueError):
        FusedRecord(0.0, "volume", None, 0.5, {}, "q4_titrating", "t6")


def test_datastore_jsonl_round_trip():
    store = Datastore()
    store.record(_rec(1.0))
    store.record(_rec(2.0, None, 0.0, (DATA_QUALITY,)))
    assert Datastore.from_jsonl(store.to_jsonl()).to_jsonl() == store.to_jsonl()


def test_smoothing_constant_series():
    series = [(float(i), 7.0) for i in range(40)]
    assert smooth_single_source(series) == [(t, v, "high") for t, v in series]


def test_smoothing_flags_spike():
    series = [(float(i), 7.0 + 0.01 * ((-1) ** i)) for i in range(40)]
    series[25] = (25.0, 12.0)
    out = smooth_single_source(series)
    window = [v for _, v in series[5:26]]
    import statistics
    assert out[25][2] == "low"
    assert out[25][1] == pytest.approx(statistics.median(window))
    assert all(lbl == "high" for i, (_, _, lbl) in enumerate(out) if i != 25)


def test_smoothing_ramp_unchanged():
    series = [(float(i), 1.0 + 0.05 * i) for i in range(60)]
    assert all(lbl == "high" and v == s[1] for (_, v, lbl), s in zip(smooth_single_source(series), series))


@settings(max_examples=300, deadline=None)
@given(fp.channel_lists)
def test_weight_normalisation(channels):
    fp.weights_normalised(channels)


@settings(max_examples=300, deadline=None)
@given(fp.channel_lists)
def test_convexity(channels):
    fp.convex(channels)


@settings(max_examples=300, deadline=None)
@given(fp.channel_lists)
def test_gating_idempotence(channels):
    fp.gating_idempotent(channels)


@settings(max_examples=300, deadline=None)
@given(fp.included_lists, st.integers(0, 3), st.floats(0.01, 0.4))
def test_pull_monotonicity(channels, index, bump):
    fp.pull_monotone(channels, index, bump)


@settings(max_examples=300, deadline=None)
@given(fp.values, fp.gammas, st.booleans())
def test_state_inconsistency_zeroing(value, gamma, anomalous):
    fp.inconsistency_zeroed(value, gamma, anomalous)


@settings(max_examples=300, deadline=None)
@given(fp.values, fp.gammas)
def test_anomaly_attenuation(value, gamma):
    fp.anomaly_attenuated(value, gamma)


@settings(max_examples=300, deadline=None)
@given(fp.channel_lists)
def test_empty_inclusion_set_is_null(channels):
    fp.empty_is_null(channels)
