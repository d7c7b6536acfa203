from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import savgol_filter

from chemloop.analysis import (
    AcidBaseSystem,
    BadWindow,
    GridMismatch,
    HalfPointOutOfRange,
    NonUniformGrid,
    TitrationCurve,
    TooFewPoints,
    analyze_curve,
    compute_pka,
    derivative,
    proton_balance_pka,
    resample_uniform,
    savitzky_golay,
    stddev_vs_theory,
)
from chemloop.chemistry import AcidSpec, titration_curve

DROP = 0.046875
SYSTEM = AcidBaseSystem(0.1, 25.0, 0.1)


def _noiseless(spec: AcidSpec, v_max: float) -> TitrationCurve:
    v = np.arange(0.0, v_max, DROP)
    return TitrationCurve(*zip(*titration_curve(spec, 0.1, v)))


@pytest.fixture(scope="module")
def hcl_curve():
    return _noiseless(AcidSpec("HCl", "strong", (), 0.1, 0.025), 35.0)


@pytest.fixture(scope="module")
def maleic_curve():
    return _noiseless(AcidSpec("maleic", "weak", (1.92, 6.23), 0.1, 0.025), 60.0)


@pytest.fixture(scope="module")
def acetic_curve():
    return _noiseless(AcidSpec("acetic", "weak", (4.76,), 0.1, 0.025), 35.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=11, max_size=60), st.sampled_from([(5, 2), (11, 3), (7, 3)]))
def test_savitzky_golay_matches_scipy(y, wo):
    window, order = wo
    if len(y) < window:
        return
    ours = savitzky_golay(y, window, order)
    ref = savgol_filter(np.asarray(y), window, order, mode="interp")
    assert np.allclose(ours, ref, atol=1e-8, rtol=1e-8)


def test_savitzky_golay_preserves_cubic():
    x = np.linspace(-2, 2, 41)
    y = 0.5 * x**3 - x + 2
    assert np.allclose(savitzky_golay(y, 11, 3), y, atol=1e-10)


@pytest.mark.parametrize("window,order", [(4, 2), (0, 0), (5, 5)])
def test_savitzky_golay_bad_window(window, order):
    with pytest.raises(BadWindow):
        savitzky_golay(np.zeros(20), window, order)


def test_savitzky_golay_short_series():
    with pytest.raises(BadWindow):
        savitzky_golay(np.zeros(5), 11, 3)


def test_derivatives_exact_on_quadratic():
    v = 0.05 * np.arange(30)
    y = 3 * v**2 - v
    assert np.allclose(derivative(v, y, 1), 6 * v - 1, atol=1e-9)
    assert np.allclose(derivative(v, y, 2), 6.0, atol=1e-6)


def test_derivative_needs_uniform_grid():
    with pytest.raises(NonUniformGrid):
        derivative([0.0, 0.1, 0.3, 0.4], [0, 1, 2, 3])


def test_resample():
    c = TitrationCurve([0.0, 0.1, 0.25, 0.3, 0.5], [0.0, 1.0, 2.5, 3.0, 5.0])
    r = resample_uniform(c, 0.05)
    assert np.allclose(r.volumes, 0.05 * np.arange(11))
    assert np.allclose(r.values, 10 * r.volumes)
    with pytest.raises(TooFewPoints):
        resample_uniform(TitrationCurve([0, 1, 2], [0, 1, 2]), 0.1)


def test_hcl_noiseless(hcl_curve):
    res = analyze_curve(hcl_curve, system=SYSTEM)
    assert len(res.equivalence_points) == 1
    assert res.equivalence_points[0].volume == pytest.approx(25.0, abs=0.02)
    assert res.equivalence_points[0].value == pytest.approx(7.0, abs=0.05)
    assert not res.pka[0].applicable and res.pka[0].pka is None


def test_maleic_noiseless(maleic_curve):
    res = analyze_curve(maleic_curve, system=SYSTEM)
    vols = [p.volume for p in res.equivalence_points]
    assert vols == pytest.approx([25.0, 50.0], abs=0.02)
    assert [p.pka for p in res.pka] == pytest.approx([1.92, 6.23], abs=0.01)


def test_acetic_noiseless(acetic_curve):
    res = analyze_curve(acetic_curve, system=SYSTEM)
    assert len(res.equivalence_points) == 1
    assert 7.5 < res.equivalence_points[0].value < 9.5
    assert res.pka[0].pka == pytest.approx(4.76, abs=0.01)
    # without the correction the half-point pH is the textbook estimate
    assert analyze_curve(acetic_curve).pka[0].pka == pytest.approx(4.76, abs=0.01)


def test_proton_balance_recovers_pka():
    # exact buffer point of a 1:1 mixture, solved by hand from the charge balance
    spec = AcidSpec("acetic", "weak", (4.76,), 0.1, 0.025)
    (v, ph), = titration_curve(spec, 0.1, [12.5])
    pka, f = proton_balance_pka(ph, v, 1, SYSTEM)
    assert pka == pytest.approx(4.76, abs=1e-9)
    assert 0 < f < 1


def test_pka_half_point_out_of_range(hcl_curve):
    res = analyze_curve(hcl_curve)
    with pytest.raises(HalfPointOutOfRange):
        compute_pka(res.grid[res.grid > 20], res.smoothed[res.grid > 20], res.equivalence_points)
    with pytest.raises(HalfPointOutOfRange):
        compute_pka(res.grid, res.smoothed, [])


def test_stddev_identical_replicates_is_zero():
    grid = 0.05 * np.arange(700)
    theory = np.sin(grid)
    reps = [TitrationCurve(grid, theory + 0.01) for _ in range(3)]
    s = stddev_vs_theory(reps, theory, 25.0)
    assert np.all(s.sigma == 0.0)


def test_stddev_two_replicates_hand_value():
    grid = 0.05 * np.arange(700)
    theory = np.zeros_like(grid)
    d = np.where(np.abs(grid - 25.0) <= 2.0, 0.5, 0.01)
    s = stddev_vs_theory([TitrationCurve(grid, d), TitrationCurve(grid, -d)], theory, 25.0)
    assert s.plateau_max == pytest.approx(0.01 * np.sqrt(2))
    assert s.transition_max == pytest.approx(0.5 * np.sqrt(2))
    assert abs(s.transition_at - 25.0) <= 2.0


def test_stddev_grid_mismatch():
    a = TitrationCurve(0.05 * np.arange(100), np.zeros(100))
    b = TitrationCurve(0.05 * np.arange(99), np.zeros(99))
    with pytest.raises(GridMismatch):
        stddev_vs_theory([a, b], np.zeros(100), 2.5)
    with pytest.raises(GridMismatch):
        stddev_vs_theory([a], np.zeros(100), 2.5)
