"""Property bodies for the fusion algorithm, shared by the module tests and the acceptance suite."""
from __future__ import annotations

import math

from hypothesis import assume
from hypothesis import strategies as st

from chemloop.fusion import DATA_QUALITY, FusionConfig, ObservationChannel, fuse, gate_confidence

CFG = FusionConfig()
_ids = ["audio", "stat", "visual", "sensor"]

values = st.floats(-10.0, 10.0, allow_nan=False)
gammas = st.floats(0.0, 1.0)
channel_lists = st.lists(st.tuples(values, gammas), min_size=0, max_size=4).map(
    lambda xs: [(_ids[i], v, g) for i, (v, g) in enumerate(xs)]
)


included_lists = st.lists(
    st.tuples(values, st.floats(0.6, 0.95)), min_size=2, max_size=4
).map(lambda xs: [(_ids[i], v, g) for i, (v, g) in enumerate(xs)])


def weights_normalised(channels) -> None:
    res = fuse(channels, CFG)
    if res.value is None:
        return
    assert abs(sum(res.weights.values()) - 1.0) <= 1e-12


def convex(channels) -> None:
    res = fuse(channels, CFG)
    included = [v for _, v, g in channels if g >= CFG.threshold]
    if res.value is None:
        assert not included
        return
    assert min(included) <= res.value <= max(included)


def gating_idempotent(channels) -> None:
    res = fuse(channels, CFG)
    kept = [c for c in channels if c[2] >= CFG.threshold]
    res2 = fuse(kept, CFG)
    assert (res.value, res.confidence) == (res2.value, res2.confidence)


def pull_monotone(channels, index: int, bump: float) -> None:
    included = [c for c in channels if c[2] >= CFG.threshold]
    assume(len(included) >= 2)
    before = fuse(included, CFG).value
    # only channels away from the fused value have a direction to pull in
    movable = [j for j, c in enumerate(included) if abs(c[1] - before) > 1e-9]
    assume(movable)
    i = movable[index % len(movable)]
    cid, vi, gi = included[i]
    bump = min(bump, 1.0 - gi)
    assume(bump > 0)
    bumped = list(included)
    bumped[i] = (cid, vi, gi + bump)
    after = fuse(bumped, CFG).value
    assert abs(after - vi) < abs(before - vi)


def inconsistency_zeroed(value: float, gamma: float, anomalous: bool) -> None:
    ch = ObservationChannel("stat", value, gamma)
    g = gate_confidence(ch, no_operation=True, anomalous=anomalous, config=CFG)
    if value != 0:
        assert g == 0.0
    else:
        assert g == (gamma * CFG.attenuation if anomalous else gamma)


def anomaly_attenuated(value: float, gamma: float) -> None:
    ch = ObservationChannel("audio", value, gamma)
    g = gate_confidence(ch, no_operation=False, anomalous=True, config=CFG)
    assert math.isclose(g, 0.1 * gamma, rel_tol=1e-15, abs_tol=0.0)


def empty_is_null(channels) -> None:
    below = [(cid, v, min(g, CFG.threshold * 0.999)) for cid, v, g in channels]
    res = fuse(below, CFG)
    assert res.value is None and res.confidence == 0.0 and DATA_QUALITY in res.anomalies
