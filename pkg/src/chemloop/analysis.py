"""Post-run titration analysis.

The per-drop (volume, pH) series is resampled onto a uniform grid, smoothed
with a Savitzky-Golay filter and differentiated with finite differences.
Equivalence points are first-derivative peaks refined by the nearest
downward zero crossing of the second derivative.  pKa values are read at the
half-equivalence volumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .chemistry import KW_25C
from .fusion import Datastore


class AnalysisError(ValueError):
    pass


class TooFewPoints(AnalysisError):
    pass


class BadWindow(AnalysisError):
    pass


class NonUniformGrid(AnalysisError):
    pass


class HalfPointOutOfRange(AnalysisError):
    pass


class GridMismatch(AnalysisError):
    pass


@dataclass
class TitrationCurve:
    volumes: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.volumes = np.asarray(self.volumes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.volumes.shape != self.values.shape:
            raise ValueError("volumes and values must have the same length")

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def step(self) -> float | None:
        if len(self.volumes) < 2:
            return None
        return float(self.volumes[1] - self.volumes[0])


def curve_from_store(store: Datastore, quantity: str = "pH", volume_quantity: str = "volume_total") -> TitrationCurve:
    """Pair each per-drop reading with the cumulative volume recorded before it.

    The baseline reading, written before any titrant is added, sits at 0 mL.
    """
    volume = 0.0
    vols: list[float] = []
    vals: list[float] = []
    for rec in store:
        if rec.quantity == volume_quantity and rec.value is not None:
            volume = float(rec.value)
        elif rec.quantity == quantity and rec.value is not None:
            if vols and vols[-1] == volume:
                vals[-1] = float(rec.value)
            else:
                vols.append(volume)
                vals.append(float(rec.value))
    return TitrationCurve(np.array(vols), np.array(vals), {"quantity": quantity})


def resample_uniform(curve: TitrationCurve, step: float) -> TitrationCurve:
    """Linear interpolation onto ``v0, v0 + step, ...`` up to the last volume."""
    if len(curve) < 4:
        raise TooFewPoints(f"need at least 4 points, got {len(curve)}")
    if step <= 0:
        raise ValueError("step must be positive")
    v, y = curve.volumes, curve.values
    if np.any(np.diff(v) <= 0):
        raise ValueError("curve volumes must be strictly ascending")
    n = int(math.floor((v[-1] - v[0]) / step + 1e-9)) + 1
    grid = v[0] + step * np.arange(n)
    return TitrationCurve(grid, np.interp(grid, v, y), dict(curve.metadata))


def _sg_coefficients(window: int, order: int, pos: int) -> np.ndarray:
    """Least-squares weights giving the fitted value at offset ``pos`` of the window."""
    x = np.arange(window, dtype=float) - (window - 1) / 2
    a = np.vander(x, order + 1, increasing=True)
    # row of the pseudo-inverse times the monomials at the evaluation point
    target = np.array([x[pos] ** k for k in range(order + 1)])
    return target @ np.linalg.pinv(a)


def savitzky_golay(series: Sequence[float], window: int = 11, order: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing with one-sided fits over the first and last windows."""
    y = np.asarray(series, dtype=float)
    if window < 1 or window % 2 == 0:
        raise BadWindow(f"window must be a positive odd count, got {window}")
    if order >= window:
        raise BadWindow(f"order {order} must be below the window {window}")
    n = len(y)
    if n < window:
        raise BadWindow(f"series of {n} points is shorter than the window {window}")
    half = window // 2
    out = np.empty(n)
    centre = _sg_coefficients(window, order, half)
    # interior: correlate with the centred weights
    out[half : n - half] = np.correlate(y, centre, mode="valid")
    for i in range(half):
        out[i] = _sg_coefficients(window, order, i) @ y[:window]
        out[n - 1 - i] = _sg_coefficients(window, order, window - 1 - i) @ y[n - window :]
    return out


def _check_uniform(volumes: np.ndarray) -> float:
    d = np.diff(volumes)
    if len(d) == 0:
        raise TooFewPoints("need at least 2 grid points")
    h = float(d.mean())
    if np.any(np.abs(d - h) > 1e-9 * max(1.0, abs(h))):
        raise NonUniformGrid("derivatives need a uniform grid")
    return h


def derivative(volumes: Sequence[float], values: Sequence[float], order: int = 1) -> np.ndarray:
    """Central differences with second-order one-sided formulas at the edges."""
    v = np.asarray(volumes, dtype=float)
    y = np.asarray(values, dtype=float)
    h = _check_uniform(v)
    n = len(y)
    out = np.empty(n)
    if order == 1:
        if n < 3:
            raise TooFewPoints("first derivative needs 3 points")
        out[1:-1] = (y[2:] - y[:-2]) / (2 * h)
        out[0] = (-3 * y[0] + 4 * y[1] - y[2]) / (2 * h)
        out[-1] = (3 * y[-1] - 4 * y[-2] + y[-3]) / (2 * h)
    elif order == 2:
        if n < 4:
            raise TooFewPoints("second derivative needs 4 points")
        out[1:-1] = (y[2:] - 2 * y[1:-1] + y[:-2]) / h**2
        out[0] = (2 * y[0] - 5 * y[1] + 4 * y[2] - y[3]) / h**2
        out[-1] = (2 * y[-1] - 5 * y[-2] + 4 * y[-3] - y[-4]) / h**2
    else:
        raise ValueError("order must be 1 or 2")
    return out


@dataclass(frozen=True)
class EquivalencePoint:
    volume: float
    value: float
    peak_volume: float
    peak_height: float
    refined: bool


def _zero_crossing(v: np.ndarray, d2: np.ndarray, i: int, reach: int) -> float | None:
    """Nearest downward sign change of ``d2`` around index ``i``, linearly interpolated."""
    best = None
    lo, hi = max(0, i - reach), min(len(d2) - 2, i + reach)
    for j in range(lo, hi + 1):
        a, b = d2[j], d2[j + 1]
        if a > 0 >= b or a >= 0 > b:
            x = v[j] + (v[j + 1] - v[j]) * (a / (a - b)) if a != b else v[j]
            if best is None or abs(x - v[i]) < abs(best - v[i]):
                best = x
    return best


def find_equivalence_points(
    volumes: np.ndarray,
    smoothed: np.ndarray,
    d1: np.ndarray,
    d2: np.ndarray,
    prominence_factor: float = 5.0,
    min_separation: float = 2.0,
    noise_floor: float = 0.0,
) -> list[EquivalencePoint]:
    """Locate equivalence points as prominent peaks of the first derivative.

    The prominence threshold is ``prominence_factor`` times the median
    ``|d1|``, raised to ``noise_floor`` when that is larger.  Each candidate
    is refined to the zero crossing of ``d2`` when that crossing lies within
    one grid step of the peak; otherwise the peak location stands.
    """
    v = np.asarray(volumes, dtype=float)
    h = _check_uniform(v)
    scale = float(np.median(np.abs(d1)))
    prominence = max(prominence_factor * scale, noise_floor)
    if prominence <= 0:
        prominence = 1e-12
    distance = max(1, int(round(min_separation / h)))
    peaks, props = find_peaks(d1, prominence=prominence, distance=distance)
    points = []
    for i in peaks:
        if d1[i] <= 0:
            continue
        x = _zero_crossing(v, d2, int(i), 2)
        refined = x is not None and abs(x - v[i]) <= h + 1e-12
        vol = float(x) if refined else float(v[i])
        points.append(EquivalencePoint(vol, float(np.interp(vol, v, smoothed)), float(v[i]), float(d1[i]), refined))
    return points


@dataclass(frozen=True)
class PkaEstimate:
    index: int
    v_half: float
    ph_half: float
    pka: float | None
    applicable: bool
    method: str


@dataclass(frozen=True)
class AcidBaseSystem:
    """Nominal composition used for the proton-balance correction."""

    analyte_conc: float
    analyte_volume_ml: float
    titrant_conc: float
    kw: float = KW_25C


def proton_balance_pka(ph: float, v_ml: float, k: int, system: AcidBaseSystem) -> tuple[float | None, float]:
    """pKa from one buffer point, accounting for free H+ and OH-.

    Returns ``(pKa, f)`` with ``f`` the fraction of the k-th proton removed;
    pKa is None when ``f`` falls outside (0, 1).
    """
    total = (system.analyte_volume_ml + v_ml) * 1e-3
    na = system.titrant_conc * v_ml * 1e-3 / total
    ca = system.analyte_conc * system.analyte_volume_ml * 1e-3 / total
    h = 10.0**-ph
    oh = system.kw / h
    f = (na + h - oh) / ca - (k - 1)
    if not 0.0 < f < 1.0:
        return None, f
    return ph - math.log10(f / (1.0 - f)), f


def compute_pka(
    volumes: np.ndarray,
    smoothed: np.ndarray,
    points: Sequence[EquivalencePoint],
    system: AcidBaseSystem | None = None,
    strong_fraction: float = 0.95,
) -> list[PkaEstimate]:
    """Half-equivalence pKa for each equivalence point.

    ``V_half`` is the midpoint between consecutive equivalence volumes, with
    the first measured from 0 mL.  Without ``system`` the pKa is the pH at
    ``V_half``.  With it, the pH is corrected by the proton balance; a proton
    that is already more than ``strong_fraction`` dissociated at its
    half-equivalence point belongs to a strong acid and gets no pKa.
    """
    if not points:
        raise HalfPointOutOfRange("no equivalence point to take a half-equivalence from")
    v = np.asarray(volumes, dtype=float)
    out = []
    prev = 0.0
    for k, p in enumerate(points, start=1):
        v_half = 0.5 * (prev + p.volume)
        prev = p.volume
        if not v[0] - 1e-9 <= v_half <= v[-1] + 1e-9:
            raise HalfPointOutOfRange(f"V_half = {v_half:.3f} mL lies outside the curve")
        ph = float(np.interp(v_half, v, smoothed))
        if system is None:
            out.append(PkaEstimate(k, v_half, ph, ph, True, "half_equivalence"))
            continue
        pka, f = proton_balance_pka(ph, v_half, k, system)
        if pka is None or f > strong_fraction:
            out.append(PkaEstimate(k, v_half, ph, None, False, "not_applicable_strong_acid"))
        else:
            out.append(PkaEstimate(k, v_half, ph, pka, True, "half_equivalence_proton_balance"))
    return out


def estimate_noise(values: Sequence[float]) -> float:
    """Robust white-noise scale of a series from its second differences."""
    y = np.asarray(values, dtype=float)
    if len(y) < 5:
        return 0.0
    d = np.diff(y, 2)
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(6.0))


def derivative_noise_gain(step: float, window: int, order: int) -> float:
    """Standard deviation of the smoothed first derivative per unit input noise."""
    n = 4 * window + 1
    impulse = np.zeros(n)
    impulse[n // 2] = 1.0
    grid = step * np.arange(n)
    response = derivative(grid, savitzky_golay(impulse, window, order), 1)
    return float(np.sqrt(np.sum(response**2)))


@dataclass
class AnalysisResult:
    raw: TitrationCurve
    grid: np.ndarray
    resampled: np.ndarray
    smoothed: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    equivalence_points: list[EquivalencePoint]
    pka: list[PkaEstimate]


def analyze_curve(
    curve: TitrationCurve,
    step: float = 0.05,
    window: int = 11,
    order: int = 3,
    prominence_factor: float = 5.0,
    min_separation: float = 2.0,
    system: AcidBaseSystem | None = None,
    noise_sigmas: float = 6.0,
) -> AnalysisResult:
    """Resample, smooth, differentiate, then locate equivalence points and pKa.

    ``noise_sigmas`` sets a peak-prominence floor at that many standard
    deviations of the derivative noise implied by the curve's own noise level.
    """
    uni = resample_uniform(curve, step)
    smoothed = savitzky_golay(uni.values, window, order)
    d1 = derivative(uni.volumes, smoothed, 1)
    d2 = derivative(uni.volumes, smoothed, 2)
    floor = noise_sigmas * estimate_noise(curve.values) * derivative_noise_gain(step, window, order)
    points = find_equivalence_points(uni.volumes, smoothed, d1, d2, prominence_factor, min_separation, floor)
    pka = compute_pka(uni.volumes, smoothed, points, system) if points else []
    return AnalysisResult(curve, uni.volumes, uni.values, smoothed, d1, d2, points, pka)


@dataclass(frozen=True)
class StddevSummary:
    volumes: np.ndarray
    sigma: np.ndarray
    plateau_rms: float
    plateau_min: float
    plateau_max: float
    transition_max: float
    transition_at: float

    @property
    def dominance(self) -> float:
        return self.transition_max / self.plateau_max if self.plateau_max > 0 else math.inf


def common_grid(curves: Sequence[TitrationCurve], step: float) -> np.ndarray:
    end = min(float(c.volumes[-1]) for c in curves)
    start = max(float(c.volumes[0]) for c in curves)
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def stddev_vs_theory(
    replicates: Sequence[TitrationCurve],
    theory: np.ndarray,
    v_eq: float | Sequence[float],
    half_width: float = 2.0,
) -> StddevSummary:
    """Per-volume sample standard deviation (ddof 1) of measured minus theory.

    All replicates and the theory array must share one grid.  Grid points
    within ``half_width`` of any equivalence volume form the transition window;
    the rest form the plateau.
    """
    if len(replicates) < 2:
        raise GridMismatch("need at least two replicates")
    grid = replicates[0].volumes
    for c in replicates[1:]:
        if len(c.volumes) != len(grid) or not np.allclose(c.volumes, grid, rtol=0, atol=1e-9):
            raise GridMismatch("replicates are not on a common grid")
    theory = np.asarray(theory, dtype=float)
    if theory.shape != grid.shape:
        raise GridMismatch("theory curve does not match the replicate grid")
    resid = np.stack([c.values - theory for c in replicates])
    sigma = resid.std(axis=0, ddof=1)
    centres = np.atleast_1d(np.asarray(v_eq, dtype=float))
    near = (np.abs(grid[:, None] - centres[None, :]) <= half_width + 1e-9).any(axis=1)
    plateau = sigma[~near]
    trans = sigma[near]
    if plateau.size == 0 or trans.size == 0:
        raise GridMismatch("grid does not cover both plateau and transition")
    j = int(np.argmax(np.where(near, sigma, -np.inf)))
    return StddevSummary(
        grid,
        sigma,
        float(np.sqrt(np.mean(plateau**2))),
        float(plateau.min()),
        float(plateau.max()),
        float(trans.max()),
        float(grid[j]),
    )


def color_transition(store: Datastore, quantity: str = "color") -> float | None:
    """Cumulative volume paired with the first per-drop reading of colour code 1."""
    curve = curve_from_store(store, quantity)
    for v, c in zip(curve.volumes, curve.values):
        if c >= 0.5:
            return float(v)
    return None
