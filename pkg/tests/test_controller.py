from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chemloop.chemistry import AcidSpec
from chemloop.controller import (
    K_ML_PER_MM,
    LEGAL_EDGES,
    ControllerConfig,
    ControllerState,
    NegativeDisplacement,
    Observation,
    Phase,
    QuantityLogger,
    accumulated,
    controller_step,
    map_displacement,
)
from chemloop.plant import D_DROP_MM, ActuatorCommand, Plant, PlantConfig

ONE_DROP = ControllerConfig(rate=D_DROP_MM / 0.1, fine_rate=D_DROP_MM / 0.1)


def active_logger(cfg=ONE_DROP, measured=None) -> QuantityLogger:
    lg = QuantityLogger(cfg)
    lg.activate(0.0, measured)
    return lg


def test_map_displacement():
    assert K_ML_PER_MM == pytest.approx(112.78195488721805, rel=1e-15)
    assert map_displacement(0.000415625, K_ML_PER_MM) == pytest.approx(0.046875, rel=1e-15)
    assert map_displacement(0.0, K_ML_PER_MM) == 0.0
    with pytest.raises(NegativeDisplacement):
        map_displacement(-1e-6, K_ML_PER_MM)


@settings(max_examples=500, deadline=None)
@given(st.one_of(st.just(0.0), st.floats(1e-12, 10.0)), st.floats(1e-3, 1e3))
def test_map_linear(dd, k):
    assert map_displacement(2 * dd, k) == pytest.approx(2 * map_displacement(dd, k), rel=1e-15, abs=0.0)


def test_ten_motion_steps():
    lg = active_logger()
    for i in range(10):
        cmd, rec = lg.step(0.1 * (i + 1), Observation(None, 0.1))
        assert cmd.closure_rate == pytest.approx(D_DROP_MM / 0.1)
    q, gamma = accumulated(lg.state, lg.config)
    assert q == pytest.approx(0.46875, rel=1e-12)
    assert gamma == lg.config.gamma_motion


def test_fresh_controller():
    assert accumulated(ControllerState(), ONE_DROP) == (0.0, ONE_DROP.gamma_motion)


def test_reaching_target_waits():
    lg = active_logger(replace(ONE_DROP, target=7.0), measured=3.0)
    lg.step(0.1, Observation(3.0, 0.1))
    assert lg.state.phase is Phase.MOTION
    cmd, rec = lg.step(0.2, Observation(6.997, 0.1))
    assert lg.state.phase is Phase.WAITING and cmd == ActuatorCommand() and rec is None


def test_anomaly_in_motion_resets_without_undispensing():
    lg = active_logger()
    for i in range(4):
        lg.step(0.1 * i, Observation(None, 0.1))
    before = lg.state.q_stat
    cmd, _ = lg.step(0.5, Observation(None, 0.1, anomaly="audio_timeout"))
    assert lg.state.phase is Phase.RESET
    assert cmd.closure_rate < 0
    while lg.state.phase is Phase.RESET:
        lg.step(0.6, Observation(None, 0.1))
        if lg.state.phase is Phase.RESET:
            assert lg.state.q_stat == before


def test_escalates_after_max_retries():
    lg = active_logger(replace(ONE_DROP, max_retries=2, retract_ticks=1))
    t, escalation = 0.0, None
    for _ in range(3):
        lg.step(t, Observation(None, 0.1))
        _, rec = lg.step(t + 0.1, Observation(None, 0.1, anomaly="audio_timeout"))
        t += 0.3
        lg.step(t, Observation(None, 0.1))
        if rec is not None and rec.escalation:
            escalation = rec.escalation
    assert escalation == "audio_timeout" and lg.state.escalated
    assert lg.phase_log[-1][1] == "escalate"
    assert lg.step(t + 1, Observation(None, 0.1))[0] == ActuatorCommand()


_obs = st.builds(
    Observation,
    st.one_of(st.none(), st.floats(0.0, 14.0)),
    st.sampled_from([0.05, 0.1, 0.2]),
    st.one_of(st.none(), st.none(), st.none(), st.just("audio_timeout")),
    st.booleans(),
    st.booleans(),
    st.booleans(),
)


@settings(max_examples=1000, deadline=None)
@given(st.lists(_obs, max_size=80), st.floats(0.0, 14.0), st.integers(0, 5), st.integers(0, 6))
def test_bookkeeping_phase_legality_and_quiet_waiting(observations, target, retries, retract):
    cfg = replace(ONE_DROP, target=target, max_retries=retries, retract_ticks=retract, rate_of_change_limit=40.0)
    lg = active_logger(cfg, measured=0.0)
    closing = 0.0
    for i, obs in enumerate(observations):
        cmd, _ = lg.step(float(i), obs)
        if cmd.closure_rate > 0:
            closing += cmd.closure_rate * obs.dt
        if lg.state.phase is Phase.WAITING:
            assert cmd.closure_rate == 0.0
    assert lg.state.q_stat == pytest.approx(cfg.k * closing, rel=1e-12, abs=1e-300)
    assert lg.state.q_stat == pytest.approx(cfg.k * lg.state.displacement_total, rel=1e-12, abs=1e-300)
    phases = [p for _, p in lg.phase_log]
    for a, b in zip(phases, phases[1:]):
        if a == b:
            continue
        edge = (Phase(a), Phase(b) if b != "escalate" else "escalate")
        assert edge in LEGAL_EDGES


@pytest.mark.parametrize("target", [4.0, 4.76, 5.5, 6.0])
def test_target_bracketing_noiseless(target):
    acid = AcidSpec("acetic", "weak", (4.76,), 0.1, 0.025)
    plant = Plant(PlantConfig(ph_noise_sigma=0.0, jitter=0.0, tau=0.01, temperature_sigma=0.0), 0,
                  analyte=acid, titrant_conc=0.1)
    start = plant.equilibrium_ph
    cfg = ControllerConfig(target=target, epsilon=0.005, rate=D_DROP_MM / 0.1, fine_rate=D_DROP_MM / 0.1,
                           rate_of_change_limit=1e9)
    lg = active_logger(cfg, start)
    cmd = ActuatorCommand()
    for i in range(2000):
        frame = plant.tick(0.1, cmd)
        cmd, _ = lg.step(frame.timestamp, Observation(frame.ph, 0.1))
        if lg.state.phase is Phase.WAITING and i > 0:
            break
    final = plant.equilibrium_ph
    probe = Plant(PlantConfig(jitter=0.0), 0, analyte=acid, titrant_conc=0.1)
    probe.solution = plant.solution
    probe._add_titrant(cfg.k * D_DROP_MM)
    one_drop = probe._equilibrium_ph() - final
    assert final >= target - cfg.epsilon
    assert final - target <= cfg.epsilon + one_drop + 1e-12


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ControllerConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(rate=1.0, fine_rate=2.0)
    with pytest.raises(ValueError):
        ControllerConfig.from_config({"bogus": 1})
    cfg = ControllerConfig.from_config({"rate_drops_per_s": 5.0}, target=3.0)
    assert cfg.rate == pytest.approx(5 * D_DROP_MM) and cfg.target == 3.0


def test_inactive_controller_is_idle():
    s, cmd, rec = controller_step(ControllerState(), ONE_DROP, Observation(None, 0.1))
    assert cmd == ActuatorCommand() and rec is None and s.q_stat == 0.0
