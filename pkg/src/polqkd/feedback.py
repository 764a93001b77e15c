"""QBER-driven gradient-descent polarization compensation.

The controller only sees the per-basis QBER of a measurement window.  Each
cycle dithers PS1/PS3, steps them down the estimated gradient, re-checks,
then does the same for PS2/PS4.  Z (PS1, PS2) and X (PS3, PS4) are tuned
side by side since neither basis's error depends on the other's shifters.

Step sizes are set per basis from the current QBER.  The gain schedule is
given in phase units (rad^2 per unit QBER) and turned into volts^2 per
QBER with the shifter's calibrated slope at the current voltage, so the
update is still ``V <- V - alpha * G`` with ``G`` in QBER per volt.  A gain
of 2 is a full Newton step on the QBER bowl ``sin^2(delta/2)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

from .chip import (
    V_PI,
    PhaseSettings,
    ShifterCalibration,
    VoltageState,
    settings_from_voltages,
    uniform_calibration,
    voltage_to_phase,
    voltages_for_settings,
)
from .errors import DomainError
from .link import (
    ChannelConfig,
    DetectorConfig,
    SourceConfig,
    expected_tally,
    qber,
    sample_tally,
)

Measure = Callable[[VoltageState], tuple[float, float]]

Z_SHIFTERS = (1, 2)
X_SHIFTERS = (3, 4)

TRACE_COLUMNS = ("cycle", "t_seconds", "V1", "V2", "V3", "V4", "E_Z", "E_X", "converged_flag")


def _default_dv():
    return ((0.10, 0.05 * V_PI), (0.02, 0.02 * V_PI), (0.0, 0.01 * V_PI))


def _default_alpha():
    return ((0.10, 2.0), (0.02, 1.0), (0.0, 0.5))


@dataclass(frozen=True)
class FeedbackConfig:
    """Controller settings.

    Schedules are ``(qber_floor, value)`` pairs in descending floor order;
    the first pair whose floor the current QBER reaches is used.  Dither
    values are volts; gains are rad^2 per unit QBER (see module docstring).
    The operating window of each shifter spans phase offsets ``[pi, 4 pi]``
    above its zero-volt phase; leaving it re-centers by one full period.
    """

    e_z_th: float = 0.015
    e_x_th: float = 0.015
    dv_schedule: tuple[tuple[float, float], ...] = field(default_factory=_default_dv)
    alpha_schedule: tuple[tuple[float, float], ...] = field(default_factory=_default_alpha)
    max_cycles: int = 50
    max_evaluations: int | None = None
    window: float = 1.0
    settle_delay: float = 1.0 / 3000.0
    calibrations: tuple[ShifterCalibration, ...] = field(default_factory=uniform_calibration)
    simultaneous_bases: bool = False

    def __post_init__(self):
        if not (0 < self.e_z_th < 0.5 and 0 < self.e_x_th < 0.5):
            raise DomainError("QBER thresholds must lie in (0, 0.5)")
        for sched in (self.dv_schedule, self.alpha_schedule):
            if not sched or any(v <= 0 for _, v in sched):
                raise DomainError("schedule values must be positive")
            floors = [f for f, _ in sched]
            if floors != sorted(floors, reverse=True) or floors[-1] > 0:
                raise DomainError("schedule floors must descend to 0")
        if self.max_cycles < 1 or not self.window > 0:
            raise DomainError("need max_cycles >= 1 and a positive window")
        if self.settle_delay < 1.0 / 3000.0:
            raise DomainError("settle_delay cannot beat the 3 kHz shifter bandwidth")
        if len(self.calibrations) != 4:
            raise DomainError("need one calibration per shifter")

    def v_floor(self, j: int) -> float:
        return self.calibrations[j - 1].voltage_for_offset(math.pi)

    def v_max(self, j: int) -> float:
        return self.calibrations[j - 1].voltage_for_offset(4.0 * math.pi)


def schedule_value(schedule: Sequence[tuple[float, float]], e: float) -> float:
    for floor, value in schedule:
        if e >= floor:
            return value
    return schedule[-1][1]


class TraceRecord(NamedTuple):
    cycle: int
    t_seconds: float
    v: tuple[float, float, float, float]
    e_z: float
    e_x: float
    converged: bool
    stage: str


@dataclass
class ControllerState:
    voltages: VoltageState
    cycle: int = 0
    last_e_z: float = math.nan
    last_e_x: float = math.nan
    evaluations: int = 0
    elapsed: float = 0.0
    converged: bool = False
    clamp_events: int = 0
    fresh: bool = False  # last_e_* describe the current voltages
    trace: list[TraceRecord] = field(default_factory=list)
    gradients: list[tuple[int, int, float]] = field(default_factory=list)


class FeedbackResult(NamedTuple):
    converged: bool
    cycles_used: int
    e_z: float
    e_x: float
    evaluations: int
    elapsed: float
    trace: list[TraceRecord]


class _BudgetExhausted(Exception):
    pass


def _below(e: float, th: float) -> bool:
    return not math.isnan(e) and e <= th


def _measure(measure: Measure, state: ControllerState, v: VoltageState, cfg, stage: str):
    if cfg.max_evaluations is not None and state.evaluations >= cfg.max_evaluations:
        raise _BudgetExhausted
    e_z, e_x = measure(v)
    state.evaluations += 1
    state.elapsed += cfg.window
    done = stage == "check" and _below(e_z, cfg.e_z_th) and _below(e_x, cfg.e_x_th)
    state.trace.append(TraceRecord(state.cycle, state.elapsed, v.v, e_z, e_x, done, stage))
    return e_z, e_x


def _check(measure, state: ControllerState, cfg: FeedbackConfig) -> bool:
    """Evaluate both bases at the current voltages; True when both are under threshold."""
    if not state.fresh:
        state.last_e_z, state.last_e_x = _measure(measure, state, state.voltages, cfg, "check")
        state.fresh = True
    state.converged = _below(state.last_e_z, cfg.e_z_th) and _below(state.last_e_x, cfg.e_x_th)
    return state.converged


def _clip(v: float, j: int, cfg: FeedbackConfig) -> float:
    return min(max(v, 0.0), cfg.v_max(j))


def _basis_of(j: int) -> str:
    return "Z" if j in Z_SHIFTERS else "X"


def _dithered_pair(measure, state, cfg, dithers: dict[int, float]) -> dict[int, float]:
    """Central differences for every shifter in ``dithers``, all in the same two windows."""
    up, down = state.voltages, state.voltages
    for j, dv in dithers.items():
        up = up.with_voltage(j, _clip(state.voltages.v[j - 1] + dv, j, cfg))
        down = down.with_voltage(j, _clip(state.voltages.v[j - 1] - dv, j, cfg))
    e_up = _measure(measure, state, up, cfg, "dither+")
    e_down = _measure(measure, state, down, cfg, "dither-")
    grads = {}
    for j in dithers:
        k = 0 if _basis_of(j) == "Z" else 1
        span = up.v[j - 1] - down.v[j - 1]
        if math.isnan(e_up[k]) or math.isnan(e_down[k]) or span <= 0:
            grads[j] = math.nan
        else:
            grads[j] = (e_up[k] - e_down[k]) / span
        state.gradients.append((state.cycle, j, grads[j]))
    return grads


def estimate_gradient_pair(
    measure: Measure, state: ControllerState, basis: str, dv: float, shifter: int, cfg: FeedbackConfig
) -> float:
    """Central-difference slope of the basis QBER with respect to one shifter voltage.

    Uses two fresh windows.  ``state.voltages`` is left unchanged.  Returns
    ``nan`` when either window had no data in that basis.
    """
    allowed = Z_SHIFTERS if basis == "Z" else X_SHIFTERS
    if basis not in ("Z", "X") or shifter not in allowed:
        raise DomainError(f"shifter {shifter} does not act on the {basis} basis")
    if not dv > 0:
        raise DomainError("dither must be positive")
    return _dithered_pair(measure, state, cfg, {shifter: dv})[shifter]


def _gradients(measure, state, cfg, dithers: dict[int, float]) -> dict[int, float]:
    if cfg.simultaneous_bases:
        return _dithered_pair(measure, state, cfg, dithers)
    grads = {}
    for j, dv in dithers.items():
        grads.update(_dithered_pair(measure, state, cfg, {j: dv}))
    return grads


def _step(state: ControllerState, cfg: FeedbackConfig, j: int, grad: float, gain: float):
    """Apply ``V <- V - alpha G`` to shifter ``j`` and re-center if it leaves the window."""
    if math.isnan(grad):
        return
    cal = cfg.calibrations[j - 1]
    v = state.voltages.v[j - 1]
    slope = cal.slope(v)
    alpha = gain / (slope * slope) if slope > 0 else 0.0
    target = v - alpha * grad
    lo, hi = cfg.v_floor(j), cfg.v_max(j)
    if target < lo or target > hi:
        state.clamp_events += 1
        # park on the rail, then move one full period back inside
        clamped = min(max(target, lo), hi)
        shift = 2.0 * math.pi if target < lo else -2.0 * math.pi
        target = cal.voltage_for_offset(voltage_to_phase(cal, clamped) - cal.theta0 + shift)
    state.voltages = state.voltages.with_voltage(j, target)
    state.elapsed += cfg.settle_delay
    state.fresh = False


def _half_cycle(measure, state: ControllerState, cfg: FeedbackConfig, jz: int, jx: int):
    dithers, gains = {}, {}
    for j, e in ((jz, state.last_e_z), (jx, state.last_e_x)):
        if math.isnan(e):
            continue
        dithers[j] = schedule_value(cfg.dv_schedule, e)
        gains[j] = schedule_value(cfg.alpha_schedule, e)
    grads = _gradients(measure, state, cfg, dithers) if dithers else {}
    for j, g in grads.items():
        _step(state, cfg, j, g, gains[j])


def feedback_cycle(measure: Measure, state: ControllerState, cfg: FeedbackConfig) -> ControllerState:
    """One pass of the compensation loop; returns early once both bases are under threshold."""
    if _check(measure, state, cfg):
        return state
    _half_cycle(measure, state, cfg, 1, 3)
    if _check(measure, state, cfg):
        state.cycle += 1
        return state
    _half_cycle(measure, state, cfg, 2, 4)
    _check(measure, state, cfg)
    state.cycle += 1
    return state


def run_feedback(measure: Measure, state: ControllerState, cfg: FeedbackConfig) -> FeedbackResult:
    """Cycle until both QBERs are under threshold or the cycle/evaluation budget runs out."""
    try:
        while True:
            feedback_cycle(measure, state, cfg)
            if state.converged or state.cycle >= cfg.max_cycles:
                break
    except _BudgetExhausted:
        state.converged = False
    return FeedbackResult(
        state.converged,
        state.cycle,
        state.last_e_z,
        state.last_e_x,
        state.evaluations,
        state.elapsed,
        state.trace,
    )


def write_trace_csv(path, trace: Sequence[TraceRecord], metadata: dict | None = None):
    with open(path, "w", newline="") as fh:
        for key, value in (metadata or {}).items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in trace:
            writer.writerow([r.cycle, repr(r.t_seconds), *map(repr, r.v), repr(r.e_z), repr(r.e_x), int(r.converged)])


class LinkMeter:
    """Measurement callback backed by the link simulator.

    Each call consumes one window of simulated time starting at ``t`` and
    returns ``(QBER_Z, QBER_X)`` for the given voltages.  With ``seed`` set
    the window is sampled; otherwise the expectation is used.
    """

    def __init__(
        self,
        src: SourceConfig,
        chan: ChannelConfig,
        det: DetectorConfig,
        calibrations: Sequence[ShifterCalibration],
        window: float = 1.0,
        seed: int | Sequence[int] | None = None,
        t: float = 0.0,
    ):
        self.src, self.chan, self.det = src, chan, det
        self.calibrations = tuple(calibrations)
        self.window = window
        self.seed = seed
        self.t = t
        self.calls = 0
        self.last = None  # tally of the most recent window

    def settings(self, v: VoltageState) -> PhaseSettings:
        return settings_from_voltages(v, self.calibrations)

    def tally(self, v: VoltageState):
        s = self.settings(v)
        if self.seed is None:
            return expected_tally(self.src, self.chan, self.det, s, self.window, self.t, v.voa_z, v.voa_x)
        return sample_tally(
            self.src, self.chan, self.det, s, self.window, self.seed, self.t, v.voa_z, v.voa_x,
            slot=self.window,
        )

    def __call__(self, v: VoltageState) -> tuple[float, float]:
        t = self.tally(v)
        self.last = t
        self.t += self.window
        self.calls += 1
        return qber(t, "Z"), qber(t, "X")


def compensated_voltages(settings: PhaseSettings, cfg: FeedbackConfig) -> VoltageState:
    """Voltages realizing ``settings`` with phase offsets in ``[1.5 pi, 3.5 pi)``, clear of both rails."""
    return voltages_for_settings(settings, cfg.calibrations, lo=1.5 * math.pi)
