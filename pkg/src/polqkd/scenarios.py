"""Declarative scenarios and their runners.

A scenario is one JSON document: ``kind`` plus optional override blocks.
Every physical default is built in, so ``{"kind": "stability"}`` is a
complete recipe.  Runners return a :class:`RunResult` (a JSON report plus
CSV tables) and :func:`emit` writes it to disk byte-deterministically:
floats are written with ``repr``, JSON keys are sorted, and the metadata
block (config hash, seed, version) never contains wall-clock data.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Sequence

import numpy as np

from . import __version__
from .chip import (
    IDEAL_SETTINGS,
    PORTS,
    PhaseSettings,
    ShifterCalibration,
    port_probability_matrix,
    solve_compensation,
)
from .errors import DomainError, TallyParseError
from .feedback import (
    ControllerState,
    FeedbackConfig,
    LinkMeter,
    TRACE_COLUMNS,
    compensated_voltages,
    run_feedback,
)
from .link import (
    BASES,
    INTENSITIES,
    ChannelConfig,
    DetectorConfig,
    DriftSchedule,
    ScramblerConfig,
    SourceConfig,
    TallyBlock,
    channel_transmittance,
    draw_drift,
    expected_tally,
    qber,
    sample_tally,
    scramble_events,
    total_qber,
)
from .polarization import BB84_STATES, DriftParams, drifted_bb84
from .reference import (
    FIELD_GATE_WINDOW,
    FIELD_PULSES,
    FIELD_RUNS,
    POVM_REFERENCE,
    RECOVERED_QBER,
    STABILITY_QBER,
    nearest_run,
)
from .security import EpsilonBudget, SecurityParams, key_rate

KINDS = ("povm-table", "stability", "scramble", "sweep", "keyrate")
MODES = ("expect", "mc")
RANDOM_KINDS = ("stability", "scramble", "sweep")
PRESETS = ("none", "reference") + tuple(f"{d}km" for d in FIELD_RUNS)

POVM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Scenario:
    """One reproducible run.

    ``window`` is the stability averaging window; the scramble run uses the
    feedback block's own window.  ``settings`` fixes the decoder phases, or
    ``"compensate"`` solves them from the channel drift at ``t = 0``;
    ``None`` means the kind's default.  ``preset`` either names one of the
    field runs (``"25km"`` ...) or, for sweeps, ``"reference"`` to use the
    matching field run at every listed distance.
    """

    kind: str
    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    feedback: FeedbackConfig | None = None
    security: SecurityParams | None = None
    seed: int | None = None
    duration: float | None = None
    window: float | None = None
    mode: str = "expect"
    output_dir: str = "out"
    distances: tuple[float, ...] = ()
    settings: tuple[float, float, float, float] | str | None = None
    preset: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown scenario kind {self.kind!r}")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if self.preset not in PRESETS:
            raise DomainError(f"unknown preset {self.preset!r}")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")
        needs_seed = self.kind == "scramble" or (self.kind in RANDOM_KINDS and self.mode == "mc")
        if needs_seed and self.seed is None:
            raise DomainError(f"a seed is required for {self.kind} in {self.mode} mode")
        if self.kind == "scramble" and self.feedback is None:
            raise DomainError("scramble scenarios need a feedback block")
        if self.kind in ("sweep", "keyrate") and self.security is None:
            raise DomainError(f"{self.kind} scenarios need a security block")
        if self.security is not None and self.security.rep_rate != self.source.rep_rate:
            raise DomainError("security.rep_rate must equal source.rep_rate")
        for name in ("duration", "window"):
            value = getattr(self, name)
            if value is not None and not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be positive")
        if self.kind == "sweep" and not self.distances:
            raise DomainError("a sweep needs at least one distance")
        if any(not (d >= 0 and math.isfinite(d)) for d in self.distances):
            raise DomainError("distances must be finite and non-negative")
        if isinstance(self.settings, str) and self.settings != "compensate":
            raise DomainError("settings must be four phases or 'compensate'")

    def phase_settings(self, default: PhaseSettings | str = IDEAL_SETTINGS) -> PhaseSettings:
        choice = default if self.settings is None else self.settings
        if isinstance(choice, PhaseSettings):
            return choice
        if choice == "compensate":
            return solve_compensation(self.channel.drift.at(0.0))
        return PhaseSettings(*choice)


# --- defaults ----------------------------------------------------------------

# single-intensity source used for the QBER-only experiments
_SIGNAL_ONLY = SourceConfig(mu=0.6, nu=0.0, p_mu=1.0, p_nu=0.0)


def _kind_defaults(kind: str) -> Scenario:
    if kind == "povm-table":
        return Scenario(kind)
    if kind == "stability":
        return Scenario(kind, source=_SIGNAL_ONLY, duration=36000.0, window=300.0, settings="compensate")
    if kind == "scramble":
        run = FIELD_RUNS[75]
        return Scenario(
            kind,
            source=_SIGNAL_ONLY,
            channel=replace(run.channel(), scrambler=ScramblerConfig(enabled=True)),
            detector=run.detector(),
            feedback=FeedbackConfig(max_evaluations=500),
            duration=10800.0,
            mode="mc",
            settings="compensate",
            seed=0,  # placeholder so the template validates; never inherited
        )
    if kind == "sweep":
        return Scenario(
            kind,
            detector=DetectorConfig(gate_window=FIELD_GATE_WINDOW),
            security=SecurityParams(n_pulses=FIELD_PULSES),
            distances=tuple(float(d) for d in FIELD_RUNS),
            preset="reference",
        )
    if kind == "keyrate":
        return Scenario(kind, security=SecurityParams())
    raise DomainError(f"unknown scenario kind {kind!r}")


def _apply_preset(base: Scenario, preset: str) -> Scenario:
    if preset in ("none", "reference"):
        return replace(base, preset=preset)
    run = FIELD_RUNS[int(preset[:-2])]
    channel = replace(run.channel(), scrambler=base.channel.scrambler, drift=base.channel.drift)
    return replace(base, source=run.source(), channel=channel, detector=run.detector(), preset=preset)


# --- JSON round trip ---------------------------------------------------------


def _num(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DomainError(f"{name} must be a number, got {value!r}")
    return float(value)


def _opt_num(value, name: str) -> float | None:
    return None if value is None else _num(value, name)


def _int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DomainError(f"{name} must be an integer, got {value!r}")
    return value


def _bool(value, name: str) -> bool:
    if not isinstance(value, bool):
        raise DomainError(f"{name} must be true or false")
    return value


def _pairs(value, name: str) -> tuple[tuple[float, float], ...]:
    try:
        return tuple((_num(a, name), _num(b, name)) for a, b in value)
    except (TypeError, ValueError):
        raise DomainError(f"{name} must be a list of [floor, value] pairs") from None


def _check_keys(data, allowed, where: str):
    if not isinstance(data, dict):
        raise DomainError(f"{where} must be an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise DomainError(f"unknown keys in {where}: {', '.join(unknown)}")


def _flat_dataclass(cls, data, where: str, overrides: dict | None = None):
    names = [f.name for f in fields(cls)]
    _check_keys(data, names, where)
    overrides = overrides or {}
    kwargs = {}
    for k, v in data.items():
        if k in overrides:
            kwargs[k] = overrides[k](v, f"{where}.{k}")
        else:
            kwargs[k] = _opt_num(v, f"{where}.{k}")
    return cls(**kwargs)


def _drift_to_json(d: DriftSchedule):
    return [[t, p.varphi, p.phi] for t, p in d.events]


def _drift_from_json(value, name: str) -> DriftSchedule:
    try:
        return DriftSchedule(
            [(_num(t, name), DriftParams(_num(a, name), _num(b, name))) for t, a, b in value]
        )
    except (TypeError, ValueError):
        raise DomainError(f"{name} must be a list of [t, varphi, phi] triples") from None


def _scrambler_from_json(value, name: str) -> ScramblerConfig:
    def interval(v, n):
        return _pairs([v], n)[0]

    return _flat_dataclass(
        ScramblerConfig, value, name,
        {"enabled": _bool, "varphi_range": interval, "phi_range": interval},
    )


def _channel_from_json(value, name: str) -> ChannelConfig:
    return _flat_dataclass(
        ChannelConfig, value, name, {"drift": _drift_from_json, "scrambler": _scrambler_from_json}
    )


def _calibrations_from_json(value, name: str) -> tuple[ShifterCalibration, ...]:
    if not isinstance(value, list):
        raise DomainError(f"{name} must be a list")

    def law(v, n):
        if not isinstance(v, str):
            raise DomainError(f"{n} must be a string")
        return v

    return tuple(
        _flat_dataclass(ShifterCalibration, c, f"{name}[{i}]", {"law": law}) for i, c in enumerate(value)
    )


def _feedback_from_json(value, name: str) -> FeedbackConfig | None:
    if value is None:
        return None
    return _flat_dataclass(
        FeedbackConfig, value, name,
        {
            "dv_schedule": _pairs,
            "alpha_schedule": _pairs,
            "max_cycles": _int,
            "max_evaluations": lambda v, n: None if v is None else _int(v, n),
            "calibrations": _calibrations_from_json,
            "simultaneous_bases": _bool,
        },
    )


def _security_from_json(value, name: str) -> SecurityParams | None:
    if value is None:
        return None
    budget = lambda v, n: _flat_dataclass(EpsilonBudget, v, n)  # noqa: E731
    return _flat_dataclass(SecurityParams, value, name, {"budget": budget})


def _jsonable(obj):
    if isinstance(obj, DriftSchedule):
        return _drift_to_json(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def scenario_to_dict(s: Scenario) -> dict:
    return _jsonable(s)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_TOP_KEYS = [f.name for f in fields(Scenario)]


def scenario_from_dict(data: dict) -> Scenario:
    """Build a scenario from a (partial) JSON object on top of the kind's defaults."""
    _check_keys(data, _TOP_KEYS, "scenario")
    kind = data.get("kind")
    if kind not in KINDS:
        raise DomainError(f"scenario kind must be one of {KINDS}, got {kind!r}")
    base = _kind_defaults(kind)
    preset = data.get("preset", base.preset)
    if preset not in PRESETS:
        raise DomainError(f"unknown preset {preset!r}")
    base = _apply_preset(base, preset)
    template = scenario_to_dict(base)
    template["seed"] = None  # seeds always come from the user
    d = _merge(template, data)

    settings = d["settings"]
    if settings is not None and settings != "compensate":
        if not isinstance(settings, list) or len(settings) != 4:
            raise DomainError("settings must be four phases or 'compensate'")
        settings = tuple(_num(x, "settings") for x in settings)
    seed = d["seed"]
    if seed is not None:
        seed = _int(seed, "seed")
    distances = d["distances"]
    if not isinstance(distances, list):
        raise DomainError("distances must be a list")
    output_dir = d["output_dir"]
    if not isinstance(output_dir, str):
        raise DomainError("output_dir must be a string")

    try:
        return Scenario(
            kind=kind,
            source=_flat_dataclass(SourceConfig, d["source"], "source"),
            channel=_channel_from_json(d["channel"], "channel"),
            detector=_flat_dataclass(DetectorConfig, d["detector"], "detector"),
            feedback=_feedback_from_json(d["feedback"], "feedback"),
            security=_security_from_json(d["security"], "security"),
            seed=seed,
            duration=_opt_num(d["duration"], "duration"),
            window=_opt_num(d["window"], "window"),
            mode=d["mode"],
            output_dir=output_dir,
            distances=tuple(_num(x, "distances") for x in distances),
            settings=settings,
            preset=preset,
        )
    except TypeError as exc:  # wrong shapes deep inside a block
        raise DomainError(str(exc)) from None


def read_config(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DomainError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DomainError(f"{path}: the scenario must be a JSON object")
    return data


def load_scenario(path: str | os.PathLike) -> Scenario:
    return scenario_from_dict(read_config(path))


def config_hash(s: Scenario) -> str:
    """SHA-256 of the canonical scenario JSON, ignoring where outputs go."""
    d = scenario_to_dict(s)
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def metadata(s: Scenario) -> dict:
    return {"config_hash": config_hash(s), "kind": s.kind, "seed": s.seed, "version": __version__}


# --- output ------------------------------------------------------------------


@dataclass
class Table:
    columns: Sequence[str]
    rows: list[Sequence[Any]]


@dataclass
class RunResult:
    report: dict
    tables: dict[str, Table]
    exit_code: int = 0


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def format_csv(table: Table, meta: dict) -> str:
    buf = io.StringIO()
    for key in sorted(meta):
        buf.write(f"# {key}={meta[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell(x) for x in row])
    return buf.getvalue()


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def format_json(report: dict, meta: dict) -> str:
    doc = {"metadata": meta, **_json_clean(report)}
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit(result: RunResult, s: Scenario, out_dir: str | None = None) -> list[str]:
    """Write ``<kind>.json`` and one CSV per table; returns the paths written."""
    out_dir = out_dir or s.output_dir
    os.makedirs(out_dir, exist_ok=True)
    meta = metadata(s)
    stem = s.kind.replace("-", "_")
    paths = []
    report_path = os.path.join(out_dir, f"{stem}.json")
    with open(report_path, "w", encoding="ascii", newline="") as fh:
        fh.write(format_json(result.report, meta))
    paths.append(report_path)
    for name, table in result.tables.items():
        path = os.path.join(out_dir, f"{name}.csv")
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(format_csv(table, meta))
        paths.append(path)
    return paths


# --- runners -----------------------------------------------------------------


def povm_table(settings: PhaseSettings = IDEAL_SETTINGS, drift: DriftParams | None = None) -> np.ndarray:
    """Port probabilities for the four (optionally drifted) BB84 inputs; rows H, V, D, A."""
    drift = drift or DriftParams()
    states = np.array([drifted_bb84(s, drift).vector for s in BB84_STATES])
    return port_probability_matrix(states, settings)


def run_povm_table(s: Scenario) -> RunResult:
    settings = s.phase_settings()
    table = povm_table(settings, s.channel.drift.at(0.0))
    deviation = float(np.abs(table - POVM_REFERENCE).max())
    rows = [[state, *table[i]] for i, state in enumerate(BB84_STATES)]
    report = {
        "settings": list(settings.as_tuple()),
        "table": table.tolist(),
        "reference": POVM_REFERENCE.tolist(),
        "max_deviation": deviation,
        "matches_reference": deviation <= POVM_TOLERANCE,
        "row_sums": table.sum(axis=1).tolist(),
    }
    return RunResult(report, {"povm_table": Table(["state", *(f"P_{p}" for p in PORTS)], rows)})


def _window_tally(s: Scenario, settings, t0: float, duration: float, chan=None, src=None, slot=None):
    chan = chan or s.channel
    src = src or s.source
    if s.mode == "expect":
        return expected_tally(src, chan, s.detector, settings, duration, t0)
    return sample_tally(src, chan, s.detector, settings, duration, s.seed, t0, slot=slot or duration)


def run_stability(s: Scenario) -> RunResult:
    """Unattended run at fixed decoder settings; reports the per-window QBER with its mean and standard error."""
    duration = s.duration or 36000.0
    window = s.window or 300.0
    count = int(math.floor(duration / window + 1e-9))
    if count < 1:
        raise DomainError("duration is shorter than one window")
    settings = s.phase_settings("compensate")
    rows, totals = [], []
    for i in range(count):
        t0 = i * window
        t = _window_tally(s, settings, t0, window, slot=window)
        e = total_qber(t)
        totals.append(e)
        rows.append([i, t0, t0 + window, qber(t, "Z"), qber(t, "X"), e, float(t.n.sum())])
    valid = np.array([e for e in totals if not math.isnan(e)])
    mean = float(valid.mean()) if valid.size else math.nan
    sem = float(valid.std(ddof=1) / math.sqrt(valid.size)) if valid.size > 1 else 0.0
    report = {
        "windows": count,
        "window_seconds": window,
        "mean_qber": mean,
        "std_error": sem,
        "reported_mean_qber": STABILITY_QBER,
        "mode": s.mode,
    }
    columns = ["window", "t_start", "t_end", "E_Z", "E_X", "E_total", "sifted_counts"]
    return RunResult(report, {"stability": Table(columns, rows)})


class _EndOfRun(Exception):
    pass


def run_scramble(s: Scenario) -> RunResult:
    """Scrambled link under closed-loop compensation.

    Every window is one QBER evaluation at the current voltages.  While both
    QBERs are under threshold the loop just monitors; otherwise it hands
    the meter to the feedback controller until that returns.  Exit code 1
    flags any scramble that was never brought back under threshold.
    """
    cfg = s.feedback
    duration = s.duration or 10800.0
    rng = np.random.default_rng(s.seed)
    events = scramble_events(s.channel.scrambler, duration, rng)
    drift = s.channel.drift
    for te, d in events:
        drift = drift.with_event(te, d)
    chan = replace(s.channel, drift=drift)
    meter = LinkMeter(
        s.source, chan, s.detector, cfg.calibrations, cfg.window, s.seed if s.mode == "mc" else None
    )
    voltages = compensated_voltages(s.phase_settings("compensate"), cfg)

    series: list[list] = []
    phase = ["monitor"]

    def measure(v):
        if meter.t + cfg.window > duration + 1e-9:
            raise _EndOfRun
        t0 = meter.t
        e_z, e_x = meter(v)
        tally = meter.last
        series.append([t0, phase[0], *v.v, e_z, e_x, total_qber(tally)])
        return e_z, e_x

    stats = [
        {
            "event": i,
            "t_event": te,
            "varphi": d.varphi,
            "phi": d.phi,
            "peak_qber": math.nan,
            "recovered": False,
            "recovery_seconds": math.nan,
            "evaluations": 0,
            "recovered_qber": math.nan,
            "_post": [],
        }
        for i, (te, d) in enumerate(events)
    ]

    def current_event(t0):
        idx = None
        for i, (te, _) in enumerate(events):
            if te <= t0:
                idx = i
        return idx

    trace = []
    try:
        while True:
            phase[0] = "monitor"
            e_z, e_x = measure(voltages)
            t_end = meter.t
            k = current_event(series[-1][0])
            below = e_z <= cfg.e_z_th and e_x <= cfg.e_x_th
            if k is not None:
                st = stats[k]
                tot = series[-1][-1]
                st["peak_qber"] = tot if math.isnan(st["peak_qber"]) else max(st["peak_qber"], tot)
                if below and not st["recovered"]:
                    st["recovered"] = True
                    st["recovery_seconds"] = t_end - st["t_event"]
                if below:
                    st["_post"].append(tot)
            if below:
                continue
            phase[0] = "feedback"
            state = ControllerState(voltages, last_e_z=e_z, last_e_x=e_x, fresh=True)
            start = len(series)
            try:
                result = run_feedback(measure, state, cfg)
            finally:
                voltages = state.voltages
                trace.extend(state.trace)
                if k is not None:
                    stats[k]["evaluations"] += len(series) - start
                    for row in series[start:]:
                        stats[k]["peak_qber"] = max(stats[k]["peak_qber"], row[-1])
            if result.converged and k is not None and not stats[k]["recovered"]:
                stats[k]["recovered"] = True
                stats[k]["recovery_seconds"] = meter.t - stats[k]["t_event"]
    except _EndOfRun:
        pass

    for st in stats:
        post = st.pop("_post")
        st["recovered_qber"] = float(np.mean(post)) if post else math.nan
    recovered = [st["recovered_qber"] for st in stats if not math.isnan(st["recovered_qber"])]
    failures = [st["event"] for st in stats if not st["recovered"]]
    report = {
        "duration": duration,
        "events": len(stats),
        "recovered_events": len(stats) - len(failures),
        "failed_events": failures,
        "mean_recovered_qber": float(np.mean(recovered)) if recovered else math.nan,
        "reported_recovered_qber": RECOVERED_QBER,
        "median_recovery_seconds": (
            float(np.median([st["recovery_seconds"] for st in stats if st["recovered"]]))
            if len(failures) < len(stats)
            else math.nan
        ),
        "thresholds": [cfg.e_z_th, cfg.e_x_th],
        "mode": s.mode,
    }
    event_cols = ["event", "t_event", "varphi", "phi", "peak_qber", "recovered",
                  "recovery_seconds", "evaluations", "recovered_qber"]
    tables = {
        "scramble_series": Table(
            ["t_seconds", "phase", "V1", "V2", "V3", "V4", "E_Z", "E_X", "E_total"], series
        ),
        "scramble_events": Table(event_cols, [[st[c] for c in event_cols] for st in stats]),
        "scramble_trace": Table(
            TRACE_COLUMNS,
            [[r.cycle, r.t_seconds, *r.v, r.e_z, r.e_x, r.converged] for r in trace],
        ),
    }
    return RunResult(report, tables, exit_code=1 if failures else 0)


def recovery_trials(s: Scenario, trials: int = 100) -> dict:
    """Independent recoveries from random scrambles, starting from the pre-scramble optimum.

    Uses the scenario's scrambler distribution, feedback block and mode.
    Returns per-trial results and the converged fraction.
    """
    cfg = s.feedback or FeedbackConfig(max_evaluations=500)
    seed = 0 if s.seed is None else s.seed
    rng = np.random.default_rng(seed)
    start = compensated_voltages(s.phase_settings("compensate"), cfg)
    results = []
    for i in range(trials):
        d = draw_drift(s.channel.scrambler, rng)
        chan = replace(s.channel, drift=DriftSchedule.constant(d))
        meter = LinkMeter(
            s.source, chan, s.detector, cfg.calibrations, cfg.window,
            (seed, i) if s.mode == "mc" else None,
        )
        r = run_feedback(meter, ControllerState(start), cfg)
        final = total_qber(meter.last) if meter.last is not None else math.nan
        results.append({"varphi": d.varphi, "phi": d.phi, "converged": r.converged,
                        "evaluations": r.evaluations, "e_z": r.e_z, "e_x": r.e_x,
                        "final_qber": final, "elapsed": r.elapsed})
    ok = [r for r in results if r["converged"]]
    return {
        "trials": trials,
        "converged": len(ok),
        "fraction": len(ok) / trials if trials else math.nan,
        "median_evaluations": float(np.median([r["evaluations"] for r in ok])) if ok else math.nan,
        "median_seconds": float(np.median([r["elapsed"] for r in ok])) if ok else math.nan,
        "mean_recovered_qber": float(np.mean([r["final_qber"] for r in ok])) if ok else math.nan,
        "results": results,
    }


def _sweep_link(s: Scenario, distance: float, exact_only: bool = True):
    """Source and channel for one sweep point."""
    if s.preset == "reference":
        run = FIELD_RUNS.get(int(distance)) if float(distance).is_integer() else None
        if run is None and not exact_only:
            run = nearest_run(distance)
        if run is not None:
            chan = replace(
                s.channel,
                length_km=distance,
                atten_db_per_km=run.loss_db / run.distance_km,
            )
            return run.source(), chan, run
    return s.source, replace(s.channel, length_km=distance), None


def _zero_report() -> dict:
    return {"s_z0_l": 0.0, "s_z1_l": 0.0, "phi_z_u": 0.5, "lambda_ec": 0.0,
            "l": 0.0, "skr": 0.0, "floor_binds": True}


def sweep_point(s: Scenario, distance: float, exact_only: bool = True) -> dict:
    src, chan, run = _sweep_link(s, distance, exact_only)
    sec = replace(s.security, rep_rate=src.rep_rate)
    duration = sec.acquisition_time
    tally = _window_tally(s, s.phase_settings("compensate"), 0.0, duration, chan=chan, src=src)
    try:
        rep = asdict(key_rate(tally, src, sec))
    except DomainError:  # some category saw no detections: no key
        rep = _zero_report()
    return {
        "distance_km": distance,
        "loss_db": chan.loss_db,
        "eta": channel_transmittance(chan, s.detector),
        "mu": src.mu,
        "nu": src.nu,
        **{f"n_{b.lower()}_{k}": tally.count(b, k) for b in BASES for k in INTENSITIES},
        **{f"m_{b.lower()}_{k}": tally.errors(b, k) for b in BASES for k in INTENSITIES},
        "qber_z": qber(tally, "Z"),
        **rep,
        "reference_skr": run.skr if run is not None else math.nan,
    }


SWEEP_COLUMNS = (
    "distance_km", "loss_db", "eta", "mu", "nu",
    "n_z_mu", "n_z_nu", "n_x_mu", "n_x_nu", "m_z_mu", "m_z_nu", "m_x_mu", "m_x_nu",
    "qber_z", "s_z0_l", "s_z1_l", "phi_z_u", "lambda_ec", "l", "skr", "floor_binds", "reference_skr",
)


def run_sweep(s: Scenario, curve_step: float = 5.0) -> RunResult:
    """Key rate at each listed distance plus a denser simulated curve."""
    points = [sweep_point(s, d) for d in s.distances]
    top = max(s.distances)
    grid = np.arange(0.0, top + curve_step / 2, curve_step) if top > 0 else np.array([0.0])
    curve = [sweep_point(s, float(d), exact_only=False) for d in grid]
    report = {"points": points, "n_pulses": s.security.n_pulses, "mode": s.mode}
    tables = {
        "sweep": Table(SWEEP_COLUMNS, [[p[c] for c in SWEEP_COLUMNS] for p in points]),
        "sweep_curve": Table(
            ["distance_km", "loss_db", "qber_z", "skr"],
            [[p["distance_km"], p["loss_db"], p["qber_z"], p["skr"]] for p in curve],
        ),
    }
    return RunResult(report, tables)


# --- tally files -------------------------------------------------------------

TALLY_COLUMNS = ("basis", "intensity", "n", "m", "duration_s")
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


def _parse_number(text: str, line: int, name: str) -> float:
    text = text.strip()
    if not _NUMBER.fullmatch(text):
        raise TallyParseError(f"not a plain decimal number: {text!r}", line, name)
    return float(text)


def parse_tally(text: str) -> TallyBlock:
    """Parse the ``basis,intensity,n,m,duration_s`` tally format.

    Rules: ASCII only; one header row with exactly those columns; one row
    per (basis, intensity) pair, four in total; numbers use ``.`` as the
    decimal point, optional exponent, no thousands separators, no
    ``inf``/``nan``; every row carries the same positive duration.  Blank
    lines and lines starting with ``#`` are ignored.
    """
    try:
        text.encode("ascii")
    except UnicodeEncodeError as exc:
        line = text[: exc.start].count("\n") + 1
        raise TallyParseError("non-ASCII character", line) from None
    n = np.full((2, 2), np.nan)
    m = np.full((2, 2), np.nan)
    duration = None
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        cells = [c.strip() for c in next(csv.reader([raw]))]
        if not header_seen:
            if tuple(cells) != TALLY_COLUMNS:
                raise TallyParseError(f"header must be {','.join(TALLY_COLUMNS)}", lineno)
            header_seen = True
            continue
        if len(cells) != len(TALLY_COLUMNS):
            raise TallyParseError(f"expected {len(TALLY_COLUMNS)} fields, got {len(cells)}", lineno)
        basis, intensity = cells[0], cells[1]
        if basis not in BASES:
            raise TallyParseError(f"basis must be Z or X, got {basis!r}", lineno, "basis")
        if intensity not in INTENSITIES:
            raise TallyParseError(f"intensity must be mu or nu, got {intensity!r}", lineno, "intensity")
        i, j = BASES.index(basis), INTENSITIES.index(intensity)
        if not math.isnan(n[i, j]):
            raise TallyParseError(f"duplicate row for {basis}/{intensity}", lineno, "basis")
        cn = _parse_number(cells[2], lineno, "n")
        cm = _parse_number(cells[3], lineno, "m")
        dur = _parse_number(cells[4], lineno, "duration_s")
        if cn < 0:
            raise TallyParseError("count must be non-negative", lineno, "n")
        if cm < 0 or cm > cn:
            raise TallyParseError("errors must lie between 0 and n", lineno, "m")
        if not dur > 0:
            raise TallyParseError("duration must be positive", lineno, "duration_s")
        if duration is not None and dur != duration:
            raise TallyParseError("all rows must share one duration", lineno, "duration_s")
        duration = dur
        n[i, j], m[i, j] = cn, cm
    if not header_seen:
        raise TallyParseError("empty tally file")
    if np.isnan(n).any():
        missing = [f"{b}/{k}" for i, b in enumerate(BASES) for j, k in enumerate(INTENSITIES) if np.isnan(n[i, j])]
        raise TallyParseError(f"missing rows: {', '.join(missing)}")
    return TallyBlock(duration, n, m)


def format_tally(t: TallyBlock) -> str:
    lines = [",".join(TALLY_COLUMNS)]
    for b, k, n, m in t.rows():
        lines.append(f"{b},{k},{n!r},{m!r},{float(t.duration)!r}")
    return "\n".join(lines) + "\n"


def run_keyrate(s: Scenario, tally_file: str | os.PathLike) -> RunResult:
    """Finite-key analysis of an externally supplied tally file.

    The pulse count is taken from the file's duration and the source
    repetition rate, so the key rate uses the file's own time base.
    """
    try:
        with open(tally_file, encoding="ascii", newline="") as fh:
            text = fh.read()
    except UnicodeDecodeError:
        raise TallyParseError("non-ASCII content") from None
    tally = parse_tally(text)
    sec = replace(s.security, n_pulses=tally.duration * s.source.rep_rate)
    rep = key_rate(tally, s.source, sec)
    report = {
        "qber_z": qber(tally, "Z"),
        "qber_x": qber(tally, "X"),
        "n_pulses": sec.n_pulses,
        **asdict(rep),
    }
    cols = ["qber_z", "s_z0_l", "s_z1_l", "phi_z_u", "lambda_ec", "l", "skr", "floor_binds"]
    return RunResult(report, {"keyrate": Table(cols, [[report[c] for c in cols]])})


def run_scenario(s: Scenario, tally_file: str | None = None) -> RunResult:
    if s.kind == "povm-table":
        return run_povm_table(s)
    if s.kind == "stability":
        return run_stability(s)
    if s.kind == "scramble":
        return run_scramble(s)
    if s.kind == "sweep":
        return run_sweep(s)
    if tally_file is None:
        raise DomainError("keyrate needs a tally file")
    return run_keyrate(s, tally_file)
