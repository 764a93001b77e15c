"""Jones-vector algebra for the path-encoded polarization qubit.

After the polarization splitter-rotator, a polarization state
``alpha|H> + beta|V>`` lives on two waveguides as the amplitude pair
``(alpha, beta)``.  Everything here works on that pair with plain 2x2
complex matrices; global phase is left alone throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

SQRT1_2 = math.sqrt(0.5)

BB84_STATES = ("H", "V", "D", "A")


@dataclass(frozen=True)
class PathState:
    """Amplitude pair on the two PSR output waveguides."""

    alpha: complex
    beta: complex

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=complex)

    @property
    def norm(self) -> float:
        return math.sqrt(abs(self.alpha) ** 2 + abs(self.beta) ** 2)

    def apply(self, op: np.ndarray) -> "PathState":
        """Return ``op @ self``.  Non-unitary operators are allowed; no renormalization."""
        a, b = np.asarray(op, dtype=complex) @ self.vector
        return PathState(complex(a), complex(b))

    def inner(self, other: "PathState") -> complex:
        """``<self|other>``."""
        return complex(np.vdot(self.vector, other.vector))


def make_state(alpha: complex, beta: complex) -> PathState:
    """Normalized path state for the polarization ``alpha|H> + beta|V>``.

    The splitter-rotator is taken as the identity map from polarization
    components to waveguide amplitudes.

    >>> make_state(0, 2j)
    PathState(alpha=0j, beta=1j)
    """
    alpha, beta = complex(alpha), complex(beta)
    if not (math.isfinite(abs(alpha)) and math.isfinite(abs(beta))):
        raise DomainError("state amplitudes must be finite")
    norm = math.hypot(abs(alpha), abs(beta))
    if norm == 0.0:
        raise DomainError("cannot normalize the zero vector")
    return PathState(alpha / norm, beta / norm)


def ideal_bb84(state_id: str) -> PathState:
    if state_id == "H":
        return PathState(1 + 0j, 0j)
    if state_id == "V":
        return PathState(0j, 1 + 0j)
    if state_id == "D":
        return PathState(complex(SQRT1_2), complex(SQRT1_2))
    if state_id == "A":
        return PathState(complex(SQRT1_2), complex(-SQRT1_2))
    raise DomainError(f"unknown BB84 state {state_id!r}")


def phase_shifter(theta: float) -> np.ndarray:
    """Thermal phase shifter on the upper arm: ``diag(exp(i theta), 1)``."""
    if not math.isfinite(theta):
        raise DomainError("phase must be finite")
    return np.array([[np.exp(1j * theta), 0], [0, 1]], dtype=complex)


def mmi_2x2() -> np.ndarray:
    """Balanced 2x2 multimode-interference coupler."""
    return SQRT1_2 * np.array([[1, 1j], [1j, 1]], dtype=complex)


def splitter_1x2() -> np.ndarray:
    """Amplitude factor of the 1x2 MMIs feeding one polarization controller.

    Half of the power in each waveguide goes to each controller, so the
    operator seen by one controller is ``I / sqrt(2)``.
    """
    return SQRT1_2 * np.eye(2, dtype=complex)


def is_unitary(op: np.ndarray, atol: float = 1e-12) -> bool:
    op = np.asarray(op)
    return bool(np.allclose(op.conj().T @ op, np.eye(op.shape[0]), rtol=0, atol=atol))


def is_psd(op: np.ndarray, atol: float = 1e-12) -> bool:
    """Hermitian with no eigenvalue below ``-atol``."""
    op = np.asarray(op)
    if not np.allclose(op, op.conj().T, rtol=0, atol=atol):
        return False
    return bool(np.linalg.eigvalsh(op).min() >= -atol)


def _wrap(x: float, lo: float, period: float) -> float:
    y = lo + math.fmod(x - lo, period)
    if y < lo:
        y += period
    if y >= lo + period:  # fmod rounding at the upper edge
        y -= period
    return y


@dataclass(frozen=True)
class DriftParams:
    """Unitary fiber drift: basis rotation ``varphi`` and H/V retardation ``phi``.

    Angles are canonicalized on construction to ``varphi in [0, pi)`` and
    ``phi in [-pi, pi)``.  Shifting ``varphi`` by ``pi`` only flips the sign of
    the drift matrix, so the canonical form describes the same physics.
    """

    varphi: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.varphi) and math.isfinite(self.phi)):
            raise DomainError("drift angles must be finite")
        object.__setattr__(self, "varphi", _wrap(float(self.varphi), 0.0, math.pi))
        object.__setattr__(self, "phi", _wrap(float(self.phi), -math.pi, 2 * math.pi))


def drift_matrix(d: DriftParams) -> np.ndarray:
    """Jones matrix mapping ideal BB84 states onto their drifted versions."""
    c, s = math.cos(d.varphi), math.sin(d.varphi)
    e = np.exp(1j * d.phi)
    return np.array([[c, -s * np.conj(e)], [s * e, c]], dtype=complex)


def drifted_bb84(state_id: str, d: DriftParams) -> PathState:
    """BB84 state ``state_id`` after the fiber drift ``d``."""
    c, s = math.cos(d.varphi), math.sin(d.varphi)
    e = complex(np.exp(1j * d.phi))
    ec = e.conjugate()
    if state_id == "H":
        return PathState(complex(c), s * e)
    if state_id == "V":
        return PathState(-s * ec, complex(c))
    if state_id == "D":
        return PathState(SQRT1_2 * (c - s * ec), SQRT1_2 * (s * e + c))
    if state_id == "A":
        return PathState(SQRT1_2 * (c + s * ec), SQRT1_2 * (s * e - c))
    raise DomainError(f"unknown BB84 state {state_id!r}")


def orthogonal_partner(state_id: str) -> str:
    """The other state of the same basis."""
    return {"H": "V", "V": "H", "D": "A", "A": "D"}[state_id]
