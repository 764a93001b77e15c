"""Decoder chip: transfer matrices, port probabilities, actuators, compensation.

Each polarization controller sees ``U R(theta_b) U R(theta_a) S`` acting on
the path state; the two rows of that product are the amplitudes reaching
its two output ports (H/V for PC1, D/A for PC2).  Probabilities come from
squared amplitudes, so no matrix square roots are needed anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError
from .polarization import (
    DriftParams,
    PathState,
    drifted_bb84,
    mmi_2x2,
    phase_shifter,
    splitter_1x2,
)

PORTS = ("H", "V", "D", "A")

V_PI = 0.72  # volts
CHIP_INSERTION_LOSS_DB = 4.6
STATIC_ER_DB = 28.0

_NORM_TOL = 1e-9


@dataclass(frozen=True)
class PhaseSettings:
    """Retardances of PS1..PS4, kept un-wrapped."""

    theta1: float = 0.0
    theta2: float = math.pi
    theta3: float = 0.0
    theta4: float = math.pi / 2

    def __post_init__(self):
        if not all(math.isfinite(t) for t in self.as_tuple()):
            raise DomainError("phase settings must be finite")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.theta1, self.theta2, self.theta3, self.theta4)


IDEAL_SETTINGS = PhaseSettings(0.0, math.pi, 0.0, math.pi / 2)


class PortProbabilities(NamedTuple):
    pH: float
    pV: float
    pD: float
    pA: float


def controller_matrix(theta_a: float, theta_b: float) -> np.ndarray:
    """Transfer matrix of one polarization controller including its input split."""
    u = mmi_2x2()
    return u @ phase_shifter(theta_b) @ u @ phase_shifter(theta_a) @ splitter_1x2()


def port_rows(s: PhaseSettings) -> np.ndarray:
    """4x2 matrix whose rows map a path state to the H, V, D, A port amplitudes."""
    return np.vstack(
        [controller_matrix(s.theta1, s.theta2), controller_matrix(s.theta3, s.theta4)]
    )


def _port_index(port: str) -> int:
    try:
        return PORTS.index(port)
    except ValueError:
        raise DomainError(f"unknown port {port!r}") from None


def povm_element(port: str, s: PhaseSettings) -> np.ndarray:
    """``M^dagger M`` for ``port``: the rank-one operator ``row^dagger row``."""
    row = port_rows(s)[_port_index(port)]
    return np.outer(row.conj(), row)


def measurement_operator(port: str, s: PhaseSettings) -> np.ndarray:
    """Hermitian measurement operator ``M`` with ``M^dagger M`` the POVM element.

    The POVM element ``P`` is rank one, so its positive square root is
    ``P / sqrt(tr P)``.
    """
    p = povm_element(port, s)
    return p / math.sqrt(float(np.trace(p).real))


def port_probability_matrix(states: np.ndarray, s: PhaseSettings) -> np.ndarray:
    """Port probabilities for a batch of path states.

    Args:
        states: ``(n, 2)`` complex amplitudes, each row of unit norm.
        s: shifter settings.

    Returns:
        ``(n, 4)`` array with columns H, V, D, A.
    """
    amps = np.asarray(states, dtype=complex) @ port_rows(s).T
    return np.abs(amps) ** 2


def detection_probabilities(state: PathState, s: PhaseSettings) -> PortProbabilities:
    if abs(state.norm - 1.0) > _NORM_TOL:
        raise DomainError(f"state is not normalized (norm {state.norm!r})")
    p = port_probability_matrix(state.vector[None, :], s)[0]
    return PortProbabilities(*(float(x) for x in p))


def solve_compensation(d: DriftParams) -> PhaseSettings:
    """Shifter settings that undo the drift ``d`` in both bases.

    Z basis: ``theta1 = phi``, ``theta2 = pi - 2 varphi``.  X basis: the
    drifted |D> amplitudes ``(a, b)`` are routed entirely to port D by
    cancelling the relative phase with PS3 and choosing the PS4 mixing angle
    so the MZI output is a pure bar state.
    """
    theta1 = d.phi
    theta2 = math.pi - 2.0 * d.varphi
    dstate = drifted_bb84("D", d)
    ra, rb = abs(dstate.alpha), abs(dstate.beta)
    cross = dstate.alpha * dstate.beta.conjugate()
    theta3 = -math.atan2(cross.imag, cross.real) if ra * rb > 1e-15 else 0.0
    theta4 = math.atan2(2.0 * ra * rb, rb * rb - ra * ra)
    return PhaseSettings(theta1, theta2, theta3, theta4)


# --- actuators -------------------------------------------------------------


@dataclass(frozen=True)
class ShifterCalibration:
    """Voltage-to-phase law of one thermal shifter.

    ``quadratic`` follows heater power (phase grows as V**2); ``linear`` is
    mostly useful in tests.
    """

    v_pi: float = V_PI
    law: str = "quadratic"
    theta0: float = 0.0

    def __post_init__(self):
        if not self.v_pi > 0:
            raise DomainError("v_pi must be positive")
        if self.law not in ("quadratic", "linear"):
            raise DomainError(f"unknown phase law {self.law!r}")

    def voltage_for_offset(self, delta: float) -> float:
        """Voltage giving phase ``theta0 + delta`` (``delta >= 0``)."""
        if delta < 0:
            raise DomainError("phase offset must be non-negative")
        x = delta / math.pi
        return self.v_pi * (math.sqrt(x) if self.law == "quadratic" else x)

    def slope(self, v: float) -> float:
        """d(theta)/dV at ``v``."""
        if self.law == "quadratic":
            return 2.0 * math.pi * v / self.v_pi**2
        return math.pi / self.v_pi


def voltage_to_phase(cal: ShifterCalibration, v: float) -> float:
    if not v >= 0:
        raise DomainError(f"voltage must be non-negative, got {v!r}")
    x = v / cal.v_pi
    return cal.theta0 + math.pi * (x * x if cal.law == "quadratic" else x)


def phase_to_voltage(cal: ShifterCalibration, theta: float, lo: float = math.pi) -> float:
    """Voltage realizing ``theta`` modulo 2 pi, on the branch ``[theta0+lo, theta0+lo+2pi)``."""
    delta = lo + math.fmod(theta - cal.theta0 - lo, 2.0 * math.pi)
    if delta < lo:
        delta += 2.0 * math.pi
    return cal.voltage_for_offset(delta)


def uniform_calibration(v_pi: float = V_PI, law: str = "quadratic") -> tuple[ShifterCalibration, ...]:
    return tuple(ShifterCalibration(v_pi, law, 0.0) for _ in range(4))


@dataclass(frozen=True)
class VoltageState:
    """Drive voltages of PS1..PS4 and the two basis-branch attenuations (dB)."""

    v: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    voa_z: float = 0.0
    voa_x: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(float(x) for x in self.v))
        if len(self.v) != 4:
            raise DomainError("need exactly four shifter voltages")
        if any(x < 0 or not math.isfinite(x) for x in self.v):
            raise DomainError("shifter voltages must be finite and non-negative")
        if self.voa_z < 0 or self.voa_x < 0:
            raise DomainError("VOA attenuation must be non-negative")

    def with_voltage(self, j: int, value: float) -> "VoltageState":
        """Copy with shifter ``j`` (1-based) set to ``value``."""
        v = list(self.v)
        v[j - 1] = value
        return replace(self, v=tuple(v))


def settings_from_voltages(vs: VoltageState, cals: Sequence[ShifterCalibration]) -> PhaseSettings:
    return PhaseSettings(*(voltage_to_phase(c, v) for c, v in zip(cals, vs.v)))


def voltages_for_settings(
    s: PhaseSettings, cals: Sequence[ShifterCalibration], lo: float = math.pi
) -> VoltageState:
    return VoltageState(tuple(phase_to_voltage(c, t, lo) for c, t in zip(cals, s.as_tuple())))


def apply_voa(state_weight: float, db: float) -> float:
    """Attenuate a linear intensity by ``db`` decibels."""
    if db < 0:
        raise DomainError("attenuation must be non-negative")
    return state_weight * 10.0 ** (-db / 10.0)


# --- extinction ratio ------------------------------------------------------


@dataclass(frozen=True)
class ERSweep:
    samples: tuple[tuple[float, float], ...]

    def __post_init__(self):
        samples = tuple((float(v), float(i)) for v, i in self.samples)
        if len(samples) < 2:
            raise DomainError("an extinction sweep needs at least two samples")
        if any(i < 0 for _, i in samples):
            raise DomainError("intensities must be non-negative")
        object.__setattr__(self, "samples", samples)


class ExtinctionResult(NamedTuple):
    er_max: float
    curve: list[float]
    unbounded: bool = False


def extinction_ratio(sweep: ERSweep) -> ExtinctionResult:
    """Per-sample ``10 log10(I / I_min)`` and its maximum.

    A zero minimum intensity yields ``inf`` with ``unbounded`` set.
    """
    intensity = np.array([i for _, i in sweep.samples])
    i_min = intensity.min()
    if i_min == 0:
        curve = [0.0 if x == 0 else math.inf for x in intensity]
        return ExtinctionResult(max(curve), curve, True)
    curve = (10.0 * np.log10(intensity / i_min)).tolist()
    return ExtinctionResult(max(curve), curve, False)


def simulate_mzi_sweep(
    voltages: Sequence[float],
    cal: ShifterCalibration | None = None,
    static_er_db: float = STATIC_ER_DB,
    peak: float = 1e5,
) -> ERSweep:
    """Output intensity of a single MZI modulator while sweeping one shifter.

    The finite static extinction is modeled as a leakage floor
    ``10**(-ER/10)`` under the ideal ``sin^2(theta/2)`` fringe.
    """
    cal = cal or ShifterCalibration()
    floor = 10.0 ** (-static_er_db / 10.0)
    samples = []
    for v in voltages:
        theta = voltage_to_phase(cal, v)
        samples.append((v, peak * (floor + (1.0 - floor) * math.sin(theta / 2) ** 2)))
    return ERSweep(tuple(samples))
