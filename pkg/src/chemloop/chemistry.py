"""Ideal-solution acid/base equilibria and the EDTA indicator model.

pH is obtained from the charge balance

    [H+] + [Na+] = [OH-] + sum_strong C + sum_weak C * (alpha1 + 2 alpha2)

which is strictly increasing in [H+], so a bracketed bisection always
converges.  Bisection runs on log10[H+] because the root spans thirteen
decades and a linear bracket would spend most iterations near the upper end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

KW_25C = 1.0e-14
H_LOW = 1.0e-14
H_HIGH = 10.0


class NoBracket(ValueError):
    """The charge balance does not change sign on the search interval."""


@dataclass(frozen=True)
class AcidSpec:
    """An analyte acid as configured in a scenario.

    Parameters
    ----------
    name : str
        Display name, e.g. ``"HCl"``.
    kind : {"strong", "weak"}
        Strong acids dissociate fully; weak acids use ``pka``.
    pka : tuple of float
        One or two ascending dissociation constants. Ignored for strong acids.
    concentration : float
        mol/L.
    volume : float
        Litres of analyte initially in the vessel.
    """

    name: str
    kind: str
    pka: tuple[float, ...] = ()
    concentration: float = 0.0
    volume: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("strong", "weak"):
            raise ValueError(f"acid kind must be 'strong' or 'weak', got {self.kind!r}")
        if self.kind == "weak" and not 1 <= len(self.pka) <= 2:
            raise ValueError("weak acids need one or two pKa values")
        if list(self.pka) != sorted(self.pka):
            raise ValueError("pKa values must be ascending")
        if self.concentration < 0 or self.volume < 0:
            raise ValueError("concentration and volume must be non-negative")

    @property
    def moles(self) -> float:
        return self.concentration * self.volume

    @property
    def protons(self) -> int:
        return 1 if self.kind == "strong" else len(self.pka)


@dataclass(frozen=True)
class Species:
    """Analytical amount of one acid present in a solution."""

    name: str
    kind: str
    pka: tuple[float, ...]
    moles: float

    @classmethod
    def of(cls, acid: AcidSpec) -> "Species":
        return cls(acid.name, acid.kind, tuple(acid.pka), acid.moles)


@dataclass(frozen=True)
class SolutionState:
    species: tuple[Species, ...]
    base_moles: float
    volume: float
    kw: float = KW_25C
    temperature: float = 25.0

    def __post_init__(self) -> None:
        if self.volume <= 0:
            raise ValueError("solution volume must be positive")
        if self.base_moles < 0 or any(s.moles < 0 for s in self.species):
            raise ValueError("amounts must be non-negative")

    @classmethod
    def from_analyte(cls, acid: AcidSpec, **kw) -> "SolutionState":
        return cls((Species.of(acid),), 0.0, acid.volume, **kw)

    def add_base(self, moles: float, volume: float) -> "SolutionState":
        return replace(self, base_moles=self.base_moles + moles, volume=self.volume + volume)


def _anion_charge(h: float, kas: Sequence[float]) -> float:
    """Mean negative charge per molecule of a weak acid at [H+] = h."""
    if len(kas) == 1:
        (k1,) = kas
        return k1 / (h + k1)
    k1, k2 = kas
    d = h * h + k1 * h + k1 * k2
    return (k1 * h + 2.0 * k1 * k2) / d


def _prepared(state: SolutionState):
    strong = 0.0
    weak: list[tuple[float, tuple[float, ...]]] = []
    for s in state.species:
        c = s.moles / state.volume
        if s.kind == "strong":
            strong += c
        else:
            weak.append((c, tuple(10.0 ** -p for p in s.pka)))
    return strong, weak, state.base_moles / state.volume


def charge_residual(state: SolutionState, h: float) -> tuple[float, float]:
    """Return ``(residual, total ionic concentration)`` at ``[H+] = h``."""
    strong, weak, na = _prepared(state)
    oh = state.kw / h
    anions = strong + sum(c * _anion_charge(h, kas) for c, kas in weak)
    return h + na - oh - anions, h + na + oh + anions


def ph_of(state: SolutionState, tol: float = 1e-12, max_iter: int = 200) -> float:
    """pH of ``state`` by bisection of the charge balance.

    Parameters
    ----------
    state : SolutionState
    tol : float
        Relative tolerance on [H+].
    max_iter : int
        Iteration cap; the log-space bracket needs about 50.

    Raises
    ------
    NoBracket
        If the residual has the same sign at both ends of [1e-14, 10] M.
    """
    strong, weak, na = _prepared(state)
    kw = state.kw

    def f(h: float) -> float:
        a = strong
        for c, kas in weak:
            a += c * _anion_charge(h, kas)
        return h + na - kw / h - a

    lo, hi = math.log10(H_LOW), math.log10(H_HIGH)
    f_lo, f_hi = f(H_LOW), f(H_HIGH)
    if f_lo > 0 or f_hi < 0:
        raise NoBracket(f"charge balance not bracketed: f(lo)={f_lo:g}, f(hi)={f_hi:g}")
    step_tol = tol / math.log(10.0)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if f(10.0 ** mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < step_tol:
            break
    return -0.5 * (lo + hi)


def mixture(analyte: AcidSpec, titrant_conc: float, added_ml: float, kw: float = KW_25C) -> SolutionState:
    v_add = added_ml * 1e-3
    return SolutionState(
        (Species.of(analyte),), titrant_conc * v_add, analyte.volume + v_add, kw=kw
    )


def titration_curve(
    analyte: AcidSpec, titrant_conc: float, volumes: Iterable[float]
) -> list[tuple[float, float]]:
    """Noiseless (V mL, pH) pairs for strong-base titration of ``analyte``."""
    out = []
    prev = -math.inf
    for v in volumes:
        if v < prev:
            raise ValueError("volumes must be ascending")
        prev = v
        out.append((float(v), ph_of(mixture(analyte, titrant_conc, v))))
    return out


@dataclass(frozen=True)
class IndicatorSpec:
    bound_color: str = "magenta"
    free_color: str = "sapphire"
    threshold: float = 0.001
    codes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("indicator threshold must lie in (0, 1)")

    def code(self, color: str) -> int:
        """Numeric color code used as the observed quantity: bound 0, free 1."""
        return 0 if color == self.bound_color else 1


def free_calcium_fraction(ca_total: float, edta_added: float) -> float:
    if ca_total <= 0:
        return 0.0
    return max(ca_total - edta_added, 0.0) / ca_total


def indicator_color(ca_total: float, edta_added: float, spec: IndicatorSpec) -> str:
    """Color of a calcium indicator under 1:1 stoichiometric EDTA binding."""
    if ca_total < 0 or edta_added < 0:
        raise ValueError("amounts must be non-negative")
    if free_calcium_fraction(ca_total, edta_added) > spec.threshold:
        return spec.bound_color
    return spec.free_color
