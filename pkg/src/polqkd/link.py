"""Statistical model of the full link: decoy source, drifting lossy fiber, chip, detectors.

Two modes share one outcome model.  ``expected_tally`` returns real-valued
expectations; ``sample_tally`` draws integer counts from the same per-pulse
outcome distribution with a multinomial over all pulse slots.

Per pulse, the photons reaching the chip split into the four ports with the
chip's port probabilities (independent Poisson streams), each detector may
also fire on a dark count, and multi-click events go to a uniformly random
clicked port.  Only events where Bob's port basis matches Alice's basis
enter the tally.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .chip import CHIP_INSERTION_LOSS_DB, IDEAL_SETTINGS, PhaseSettings, port_probability_matrix
from .errors import DomainError
from .polarization import DriftParams, drifted_bb84

BASES = ("Z", "X")
INTENSITIES = ("mu", "nu")
# state order inside each basis; the first state's correct port is the
# basis's first port
BASIS_STATES = {"Z": ("H", "V"), "X": ("D", "A")}
BASIS_PORTS = {"Z": (0, 1), "X": (2, 3)}

ATTEN_DB_PER_KM = 0.1988


@dataclass(frozen=True)
class SourceConfig:
    rep_rate: float = 50e6
    mu: float = 0.6
    nu: float = 0.1
    p_mu: float = 0.5
    p_nu: float = 0.5
    p_z: float = 0.5
    p_x: float = 0.5
    intrinsic_error: float = 0.005

    def __post_init__(self):
        if not self.rep_rate > 0:
            raise DomainError("rep_rate must be positive")
        if not self.mu > self.nu >= 0:
            raise DomainError("need mu > nu >= 0")
        for name in ("p_mu", "p_nu", "p_z", "p_x"):
            if not 0 <= getattr(self, name) <= 1:
                raise DomainError(f"{name} must be a probability")
        if abs(self.p_mu + self.p_nu - 1) > 1e-9 or abs(self.p_z + self.p_x - 1) > 1e-9:
            raise DomainError("intensity and basis probabilities must each sum to 1")
        if not 0 <= self.intrinsic_error < 0.5:
            raise DomainError("intrinsic_error must lie in [0, 0.5)")

    @property
    def intensities(self) -> tuple[float, float]:
        return (self.mu, self.nu)

    @property
    def intensity_probs(self) -> tuple[float, float]:
        return (self.p_mu, self.p_nu)

    @property
    def basis_probs(self) -> tuple[float, float]:
        return (self.p_z, self.p_x)


class DriftSchedule:
    """Piecewise-constant drift: ``events`` is a sorted list of ``(t_start, DriftParams)``.

    Before the first event (or with no events) the drift is zero.
    """

    def __init__(self, events: Sequence[tuple[float, DriftParams]] = ()):
        events = sorted(((float(t), d) for t, d in events), key=lambda e: e[0])
        if any(not math.isfinite(t) for t, _ in events):
            raise DomainError("drift event times must be finite")
        self.events: tuple[tuple[float, DriftParams], ...] = tuple(events)
        self._times = [t for t, _ in self.events]

    @classmethod
    def constant(cls, d: DriftParams) -> "DriftSchedule":
        return cls([(0.0, d)])

    def at(self, t: float) -> DriftParams:
        i = bisect.bisect_right(self._times, t) - 1
        return self.events[i][1] if i >= 0 else DriftParams()

    def with_event(self, t: float, d: DriftParams) -> "DriftSchedule":
        return DriftSchedule([e for e in self.events if e[0] != t] + [(t, d)])

    def segments(self, t0: float, t1: float) -> Iterator[tuple[float, float, DriftParams]]:
        """Split ``[t0, t1)`` where the drift changes."""
        cuts = [t for t in self._times if t0 < t < t1]
        edges = [t0, *cuts, t1]
        for a, b in zip(edges, edges[1:]):
            if b > a:
                yield a, b, self.at(a)

    def __eq__(self, other):
        return isinstance(other, DriftSchedule) and self.events == other.events

    def __repr__(self):
        return f"DriftSchedule({list(self.events)!r})"


@dataclass(frozen=True)
class ScramblerConfig:
    """Random polarization scrambler.  Default drift draw: varphi ~ U[0, pi/2), phi ~ U[-pi, pi)."""

    enabled: bool = False
    min_interval: float = 1200.0
    max_interval: float = 1800.0
    varphi_range: tuple[float, float] = (0.0, math.pi / 2)
    phi_range: tuple[float, float] = (-math.pi, math.pi)

    def __post_init__(self):
        if not 0 < self.min_interval <= self.max_interval:
            raise DomainError("need 0 < min_interval <= max_interval")


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float = 0.0
    atten_db_per_km: float = ATTEN_DB_PER_KM
    extra_loss_db: float = 0.0
    drift: DriftSchedule = field(default_factory=DriftSchedule)
    scrambler: ScramblerConfig = field(default_factory=ScramblerConfig)

    def __post_init__(self):
        if self.length_km < 0 or self.atten_db_per_km < 0:
            raise DomainError("length and attenuation must be non-negative")
        if not math.isfinite(self.extra_loss_db):
            raise DomainError("extra loss must be finite")

    @property
    def loss_db(self) -> float:
        return self.length_km * self.atten_db_per_km + self.extra_loss_db


@dataclass(frozen=True)
class DetectorConfig:
    """Four identical single-photon detectors behind the chip.

    ``gate_window`` is the time over which a dark count can land in a pulse
    slot.  ``None`` means the whole slot, ``1 / rep_rate``.
    """

    efficiency: float = 0.10
    dark_rate: float = 400.0
    chip_loss_db: float = CHIP_INSERTION_LOSS_DB
    bob_basis_prob_z: float = 0.5
    gate_window: float | None = None

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise DomainError("efficiency must lie in (0, 1]")
        if self.dark_rate < 0:
            raise DomainError("dark_rate must be non-negative")
        if not 0 <= self.bob_basis_prob_z <= 1:
            raise DomainError("bob_basis_prob_z must be a probability")
        if self.gate_window is not None and not self.gate_window > 0:
            raise DomainError("gate_window must be positive")

    def dark_per_gate(self, rep_rate: float) -> float:
        window = self.gate_window if self.gate_window is not None else 1.0 / rep_rate
        return min(1.0, self.dark_rate * window)


@dataclass
class TallyBlock:
    """Sifted counts ``n`` and errors ``m``, indexed ``[basis, intensity]``.

    Basis order is ``BASES`` (Z, X); intensity order is ``INTENSITIES``
    (mu, nu).  Entries are integers in Monte Carlo mode and real
    expectations otherwise.
    """

    duration: float
    n: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float).reshape(2, 2)
        self.m = np.asarray(self.m, dtype=float).reshape(2, 2)
        if (self.n < 0).any() or (self.m < 0).any():
            raise DomainError("tally entries must be non-negative")
        if (self.m > self.n * (1 + 1e-12) + 1e-12).any():
            raise DomainError("error counts cannot exceed detection counts")

    @classmethod
    def zeros(cls, duration: float = 0.0) -> "TallyBlock":
        return cls(duration, np.zeros((2, 2)), np.zeros((2, 2)))

    def __add__(self, other: "TallyBlock") -> "TallyBlock":
        return TallyBlock(self.duration + other.duration, self.n + other.n, self.m + other.m)

    def scaled(self, factor: float) -> "TallyBlock":
        return TallyBlock(self.duration * factor, self.n * factor, self.m * factor)

    def count(self, basis: str, intensity: str) -> float:
        return float(self.n[BASES.index(basis), INTENSITIES.index(intensity)])

    def errors(self, basis: str, intensity: str) -> float:
        return float(self.m[BASES.index(basis), INTENSITIES.index(intensity)])

    def rows(self) -> list[tuple[str, str, float, float]]:
        return [
            (b, k, float(self.n[i, j]), float(self.m[i, j]))
            for i, b in enumerate(BASES)
            for j, k in enumerate(INTENSITIES)
        ]


def channel_transmittance(c: ChannelConfig, det: DetectorConfig) -> float:
    """Probability that a photon entering the fiber produces a detector click."""
    return 10.0 ** (-(c.loss_db + det.chip_loss_db) / 10.0) * det.efficiency


def click_probability(mean_photons: float, eta: float, dark_per_gate: float) -> float:
    """Probability a detector clicks for a Poissonian pulse plus dark counts."""
    p = -math.expm1(-mean_photons * eta) + dark_per_gate * math.exp(-mean_photons * eta)
    return min(1.0, max(0.0, p))


# --- outcome model -----------------------------------------------------------

# click patterns over the four detectors; row c has bit j set when port j clicks
_PATTERNS = np.array([[(c >> j) & 1 for j in range(4)] for c in range(16)], dtype=bool)
_CLICKS = _PATTERNS.sum(axis=1)
# squashing: a pattern with k clicks assigns each clicked port weight 1/k
_ASSIGN = np.zeros((16, 5))
_ASSIGN[1:, :4] = _PATTERNS[1:] / _CLICKS[1:, None]
_ASSIGN[0, 4] = 1.0


def port_outcome_probabilities(mean_at_ports: np.ndarray, dark: float) -> np.ndarray:
    """Assigned-port distribution for independent Poisson arrivals at four ports.

    Args:
        mean_at_ports: ``(..., 4)`` mean photon number arriving at H, V, D, A.
        dark: dark-click probability per detector per pulse slot.

    Returns:
        ``(..., 5)`` probabilities of the event being assigned to H, V, D, A,
        or of no click at all.
    """
    lam = np.asarray(mean_at_ports, dtype=float)
    silent = (1.0 - dark) * np.exp(-lam)
    click = -np.expm1(-lam) + dark * np.exp(-lam)
    per_port = np.where(_PATTERNS, click[..., None, :], silent[..., None, :])
    pattern = per_port.prod(axis=-1)
    return pattern @ _ASSIGN


def _branch_weights(det: DetectorConfig, voa_z: float, voa_x: float) -> np.ndarray:
    """Per-port multiplicative weights from basis-choice override and VOAs."""
    qz = det.bob_basis_prob_z
    wz = 2.0 * qz * 10.0 ** (-voa_z / 10.0)
    wx = 2.0 * (1.0 - qz) * 10.0 ** (-voa_x / 10.0)
    return np.array([wz, wz, wx, wx])


def outcome_table(
    src: SourceConfig,
    drift: DriftParams,
    det: DetectorConfig,
    settings: PhaseSettings,
    eta: float,
    voa_z: float = 0.0,
    voa_x: float = 0.0,
) -> np.ndarray:
    """Per-pulse outcome probabilities indexed ``[basis, intensity, state, outcome]``.

    ``state`` runs over the two states of the basis (``BASIS_STATES``);
    ``outcome`` over ports H, V, D, A and no-click.  The encoder sends the
    orthogonal state with probability ``intrinsic_error``.
    """
    states = [drifted_bb84(s, drift).vector for b in BASES for s in BASIS_STATES[b]]
    ports = port_probability_matrix(np.array(states), settings)  # (4 states, 4 ports)
    ports = ports * _branch_weights(det, voa_z, voa_x)
    dark = det.dark_per_gate(src.rep_rate)
    mean = np.array(src.intensities)[None, :, None] * eta * ports[:, None, :]
    clean = port_outcome_probabilities(mean, dark)  # (4 states, 2 intensities, 5)
    flipped = clean[[1, 0, 3, 2]]
    e = src.intrinsic_error
    mixed = (1.0 - e) * clean + e * flipped
    return mixed.reshape(2, 2, 2, 5).transpose(0, 2, 1, 3)


def category_probabilities(src: SourceConfig) -> np.ndarray:
    """Probability a pulse is in ``[basis, intensity, state]``."""
    pb = np.array(src.basis_probs)[:, None, None]
    pk = np.array(src.intensity_probs)[None, :, None]
    return pb * pk * np.full((1, 1, 2), 0.5)


def _fold(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduce ``[basis, intensity, state, outcome]`` counts to sifted ``n`` and ``m``."""
    n = np.zeros((2, 2))
    m = np.zeros((2, 2))
    for i, b in enumerate(BASES):
        first, second = BASIS_PORTS[b]
        block = counts[i]
        n[i] = block[:, :, first].sum(axis=1) + block[:, :, second].sum(axis=1)
        # state 0 belongs at the basis's first port, state 1 at the second
        m[i] = block[:, 0, second] + block[:, 1, first]
    return n, m


def _validate_run(duration: float):
    if not duration >= 0 or not math.isfinite(duration):
        raise DomainError("duration must be finite and non-negative")


def expected_tally(
    src: SourceConfig,
    chan: ChannelConfig,
    det: DetectorConfig,
    settings: PhaseSettings = IDEAL_SETTINGS,
    duration: float = 1.0,
    t0: float = 0.0,
    voa_z: float = 0.0,
    voa_x: float = 0.0,
) -> TallyBlock:
    """Expected sifted counts over ``[t0, t0 + duration)``."""
    _validate_run(duration)
    eta = channel_transmittance(chan, det)
    cats = category_probabilities(src)
    n = np.zeros((2, 2))
    m = np.zeros((2, 2))
    for a, b, drift in chan.drift.segments(t0, t0 + duration):
        table = outcome_table(src, drift, det, settings, eta, voa_z, voa_x)
        pulses = src.rep_rate * (b - a)
        dn, dm = _fold(pulses * cats[..., None] * table)
        n += dn
        m += dm
    return TallyBlock(duration, n, m)


def _pieces(chan: ChannelConfig, t0: float, duration: float, slot: float):
    """Cut the window at slot boundaries and drift changes: ``(start, end, drift, key)``."""
    t1 = t0 + duration
    i = math.floor(t0 / slot)
    while i * slot < t1:
        a, b = max(t0, i * slot), min(t1, (i + 1) * slot)
        for j, (sa, sb, drift) in enumerate(chan.drift.segments(a, b)):
            yield sa, sb, drift, (i, j)
        i += 1


def sample_tally(
    src: SourceConfig,
    chan: ChannelConfig,
    det: DetectorConfig,
    settings: PhaseSettings = IDEAL_SETTINGS,
    duration: float = 1.0,
    seed: int | Sequence[int] = 0,
    t0: float = 0.0,
    voa_z: float = 0.0,
    voa_x: float = 0.0,
    slot: float = 1.0,
) -> TallyBlock:
    """Monte Carlo counts over ``[t0, t0 + duration)``.

    Time is cut into fixed slots of ``slot`` seconds (and at drift changes);
    every piece draws from its own stream seeded by ``(seed, slot index,
    piece index)``.  The result therefore does not depend on how a caller
    batches consecutive windows or in which order pieces are evaluated.
    """
    _validate_run(duration)
    if not slot > 0:
        raise DomainError("slot must be positive")
    eta = channel_transmittance(chan, det)
    cats = category_probabilities(src)
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    counts = np.zeros((2, 2, 2, 5))
    for a, b, drift, key in _pieces(chan, t0, duration, slot):
        pulses = int(round(src.rep_rate * (b - a)))
        if pulses == 0:
            continue
        table = outcome_table(src, drift, det, settings, eta, voa_z, voa_x)
        pvals = (cats[..., None] * table).ravel()
        pvals = pvals / pvals.sum()
        rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key))
        counts += rng.multinomial(pulses, pvals).reshape(counts.shape)
    n, m = _fold(counts)
    return TallyBlock(duration, n, m)


def qber(t: TallyBlock, basis: str) -> float:
    """Error fraction of the sifted events in ``basis``; ``nan`` when there are none."""
    i = BASES.index(basis)
    total = t.n[i].sum()
    if total <= 0:
        return math.nan
    return float(t.m[i].sum() / total)


def total_qber(t: TallyBlock) -> float:
    total = t.n.sum()
    return float(t.m.sum() / total) if total > 0 else math.nan


# --- scrambler ---------------------------------------------------------------


class ScrambleEvent(NamedTuple):
    delay: float  # seconds since the previous event
    drift: DriftParams


def draw_drift(cfg: ScramblerConfig, rng: np.random.Generator) -> DriftParams:
    return DriftParams(rng.uniform(*cfg.varphi_range), rng.uniform(*cfg.phi_range))


def next_scramble(cfg: ScramblerConfig, rng: np.random.Generator) -> ScrambleEvent | None:
    """Time to the next scrambler trigger and the drift it leaves behind."""
    if not cfg.enabled:
        return None
    delay = rng.uniform(cfg.min_interval, cfg.max_interval)
    return ScrambleEvent(float(delay), draw_drift(cfg, rng))


def scramble_events(
    cfg: ScramblerConfig, horizon: float, rng: np.random.Generator
) -> list[tuple[float, DriftParams]]:
    """All scrambler events with absolute times in ``(0, horizon)``."""
    events = []
    t = 0.0
    while (ev := next_scramble(cfg, rng)) is not None:
        t += ev.delay
        if t >= horizon:
            break
        events.append((t, ev.drift))
    return events
