import csv
import math

import numpy as np
import pytest

import oracles
from polqkd.chip import (
    ShifterCalibration,
    VoltageState,
    settings_from_voltages,
    solve_compensation,
    uniform_calibration,
    voltage_to_phase,
)
from polqkd.errors import DomainError
from polqkd.feedback import (
    TRACE_COLUMNS,
    ControllerState,
    FeedbackConfig,
    LinkMeter,
    compensated_voltages,
    estimate_gradient_pair,
    feedback_cycle,
    run_feedback,
    schedule_value,
    write_trace_csv,
)
from polqkd.link import ChannelConfig, DetectorConfig, DriftSchedule, SourceConfig
from polqkd.polarization import DriftParams
from polqkd.reference import FIELD_RUNS
from polqkd.scenarios import recovery_trials, scenario_from_dict

SIGNAL = SourceConfig(mu=0.6, nu=0.0, p_mu=1.0, p_nu=0.0)
LINK75 = FIELD_RUNS[75]


class Surface:
    """Noise-free QBER surface of a drifted link, as a measurement callback."""

    def __init__(self, drift: DriftParams, cals=None):
        self.drift = drift
        self.cals = cals or uniform_calibration()
        self.calls = 0

    def __call__(self, v: VoltageState):
        self.calls += 1
        s = settings_from_voltages(v, self.cals)
        return oracles.qber_surface(s.as_tuple(), self.drift.varphi, self.drift.phi)


def link_meter(drift, seed=None, cfg=None):
    cfg = cfg or FeedbackConfig()
    chan = LINK75.channel()
    chan = ChannelConfig(chan.length_km, chan.atten_db_per_km, drift=DriftSchedule.constant(drift))
    return LinkMeter(SIGNAL, chan, LINK75.detector(), cfg.calibrations, seed=seed)


def start_state(cfg, drift=DriftParams()):
    return ControllerState(compensated_voltages(solve_compensation(drift), cfg))


class TestGradient:
    def test_zero_at_optimum_with_linear_law(self):
        cals = uniform_calibration(law="linear")
        cfg = FeedbackConfig(calibrations=cals)
        d = DriftParams(0.5, 1.0)
        state = start_state(cfg, d)
        m = Surface(d, cals)
        for basis, shifters in (("Z", (1, 2)), ("X", (3, 4))):
            for j in shifters:
                assert abs(estimate_gradient_pair(m, state, basis, 0.01, j, cfg)) < 1e-9

    def test_small_at_optimum_with_quadratic_law(self):
        # theta(V +- dv) - theta* = +-s dv + k dv^2 on a bowl E = delta^2 / 4,
        # so the central difference leaves 2 * (1/4) * s * k * dv^2
        cfg = FeedbackConfig()
        d = DriftParams(0.5, 1.0)
        state = start_state(cfg, d)
        dv = 0.01
        cal = cfg.calibrations[1]
        s, k = cal.slope(state.voltages.v[1]), math.pi / cal.v_pi**2
        g = estimate_gradient_pair(Surface(d), state, "Z", dv, 2, cfg)
        assert g == pytest.approx(0.5 * s * k * dv**2, rel=0.02)

    def test_matches_analytic_derivative(self):
        cfg = FeedbackConfig()
        d = DriftParams(0.4, -0.8)
        v = VoltageState((1.1, 1.3, 1.0, 1.0))
        s = settings_from_voltages(v, cfg.calibrations)
        d1, d2 = oracles.d_qber_z_d_theta(s.theta1, s.theta2, d.varphi, d.phi)
        for j, dtheta in ((1, d1), (2, d2)):
            analytic = dtheta * cfg.calibrations[j - 1].slope(v.v[j - 1])
            errors = []
            for dv in (0.02, 0.01, 0.005):
                state = ControllerState(v)
                g = estimate_gradient_pair(Surface(d), state, "Z", dv, j, cfg)
                assert state.voltages == v  # dithers are undone
                errors.append(abs(g - analytic))
            assert errors[-1] < 1e-2 * abs(analytic)
            # second-order convergence: halving the dither quarters the error
            for big, small in zip(errors, errors[1:]):
                assert big / small == pytest.approx(4.0, rel=0.1)

    def test_sign_on_monotone_section(self):
        cfg = FeedbackConfig()
        d = DriftParams()
        best = compensated_voltages(solve_compensation(d), cfg)
        above = ControllerState(best.with_voltage(2, best.v[1] + 0.05))
        below = ControllerState(best.with_voltage(2, best.v[1] - 0.05))
        assert estimate_gradient_pair(Surface(d), above, "Z", 0.01, 2, cfg) > 0
        assert estimate_gradient_pair(Surface(d), below, "Z", 0.01, 2, cfg) < 0

    def test_two_windows_per_estimate(self):
        m = Surface(DriftParams())
        estimate_gradient_pair(m, start_state(FeedbackConfig()), "X", 0.01, 3, FeedbackConfig())
        assert m.calls == 2

    @pytest.mark.parametrize("basis,shifter,dv", [("Z", 3, 0.01), ("X", 1, 0.01), ("Z", 1, 0.0), ("Q", 1, 0.01)])
    def test_rejects_bad_arguments(self, basis, shifter, dv):
        cfg = FeedbackConfig()
        with pytest.raises(DomainError):
            estimate_gradient_pair(Surface(DriftParams()), start_state(cfg), basis, dv, shifter, cfg)

    def test_no_data_gives_nan(self):
        cfg = FeedbackConfig()
        g = estimate_gradient_pair(lambda v: (math.nan, math.nan), start_state(cfg), "Z", 0.01, 1, cfg)
        assert math.isnan(g)


class TestCycle:
    def test_converged_start_changes_nothing(self):
        cfg = FeedbackConfig()
        state = start_state(cfg)
        v0 = state.voltages
        result = run_feedback(link_meter(DriftParams()), state, cfg)
        assert result.converged and result.cycles_used == 0
        assert result.evaluations == 1 and state.voltages == v0

    def test_error_decreases_after_scramble(self):
        cfg = FeedbackConfig(max_cycles=30)
        d = DriftParams(0.5, 2.0)
        meter = link_meter(d)
        state = start_state(cfg)
        first = meter(state.voltages)
        assert 0.15 < max(first) < 0.35
        result = run_feedback(meter, state, cfg)
        checks = [r.e_z + r.e_x for r in result.trace if r.stage == "check"]
        assert result.converged
        assert all(b < a for a, b in zip(checks, checks[1:]))

    def test_bases_are_independent(self):
        cfg = FeedbackConfig()
        meter = link_meter(DriftParams(0.7, 1.2))
        v = start_state(cfg).voltages
        ez, ex = meter(v)
        ez2, _ = meter(v.with_voltage(3, v.v[2] + 0.2).with_voltage(4, v.v[3] - 0.1))
        _, ex2 = meter(v.with_voltage(1, v.v[0] + 0.2).with_voltage(2, v.v[1] - 0.1))
        assert ez2 == pytest.approx(ez, abs=1e-12) and ex2 == pytest.approx(ex, abs=1e-12)

    def test_one_cycle_evaluation_count(self):
        cfg = FeedbackConfig()
        state = start_state(cfg)
        m = Surface(DriftParams(0.6, 1.0))
        feedback_cycle(m, state, cfg)
        # check, 4 dithers, check, 4 dithers, check
        assert m.calls == 11 and state.cycle == 1
        feedback_cycle(m, state, cfg)
        assert m.calls == 21  # the closing check is reused

    def test_simultaneous_bases_share_windows(self):
        cfg = FeedbackConfig(simultaneous_bases=True)
        state = start_state(cfg)
        m = Surface(DriftParams(0.6, 1.0))
        feedback_cycle(m, state, cfg)
        assert m.calls == 7

    @pytest.mark.parametrize("seed", range(8))
    def test_exit_flag_matches_last_check(self, seed):
        rng = np.random.default_rng(seed)
        d = DriftParams(rng.uniform(0, math.pi / 2), rng.uniform(-math.pi, math.pi))
        cfg = FeedbackConfig(max_cycles=int(rng.integers(1, 8)))
        result = run_feedback(link_meter(d, seed=seed), start_state(cfg), cfg)
        last = [r for r in result.trace if r.stage == "check"][-1]
        below = last.e_z <= cfg.e_z_th and last.e_x <= cfg.e_x_th
        assert result.converged == below
        assert (result.e_z, result.e_x) == (last.e_z, last.e_x)

    def test_voltages_stay_in_range(self):
        cfg = FeedbackConfig(max_cycles=40)
        rng = np.random.default_rng(3)
        for _ in range(10):
            d = DriftParams(rng.uniform(0, math.pi / 2), rng.uniform(-math.pi, math.pi))
            result = run_feedback(Surface(d), start_state(cfg), cfg)
            for r in result.trace:
                for j, v in enumerate(r.v, start=1):
                    assert 0.0 <= v <= cfg.v_max(j) + 1e-12

    def test_deterministic_traces(self):
        cfg = FeedbackConfig()
        d = DriftParams(1.0, -2.0)
        a = run_feedback(link_meter(d, seed=17), start_state(cfg), cfg)
        b = run_feedback(link_meter(d, seed=17), start_state(cfg), cfg)
        assert a.trace == b.trace

    def test_evaluation_budget(self):
        cfg = FeedbackConfig(max_evaluations=7, max_cycles=100)
        result = run_feedback(Surface(DriftParams(1.2, 2.0)), start_state(cfg), cfg)
        assert not result.converged and result.evaluations == 7

    def test_no_data_is_retried(self):
        cfg = FeedbackConfig(max_cycles=3)
        result = run_feedback(lambda v: (math.nan, math.nan), start_state(cfg), cfg)
        assert not result.converged and result.cycles_used == 3

    def test_elapsed_counts_windows_and_settling(self):
        cfg = FeedbackConfig(max_cycles=1)
        state = start_state(cfg)
        run_feedback(Surface(DriftParams(0.6, 1.0)), state, cfg)
        writes = 4  # PS1..PS4 each updated once
        assert state.elapsed == pytest.approx(state.evaluations * cfg.window + writes * cfg.settle_delay)

    def test_recovers_from_random_scrambles(self):
        cfg = FeedbackConfig(max_evaluations=500, max_cycles=1000)
        rng = np.random.default_rng(2024)
        ok = 0
        for _ in range(20):
            d = DriftParams(rng.uniform(0, math.pi / 2), rng.uniform(-math.pi, math.pi))
            ok += run_feedback(link_meter(d), start_state(cfg), cfg).converged
        assert ok >= 18


class TestConfig:
    def test_schedule_lookup(self):
        sched = ((0.10, 2.0), (0.02, 1.0), (0.0, 0.5))
        assert schedule_value(sched, 0.25) == 2.0
        assert schedule_value(sched, 0.05) == 1.0
        assert schedule_value(sched, 0.001) == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"e_z_th": 0.0},
            {"e_x_th": 0.6},
            {"max_cycles": 0},
            {"window": 0.0},
            {"settle_delay": 1e-5},
            {"dv_schedule": ((0.1, 0.01), (0.02, -0.01), (0.0, 0.01))},
            {"alpha_schedule": ((0.0, 1.0), (0.1, 2.0))},
            {"alpha_schedule": ((0.1, 2.0),)},
            {"calibrations": (ShifterCalibration(),)},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(DomainError):
            FeedbackConfig(**kwargs)

    def test_window_spans_more_than_two_pi(self):
        cfg = FeedbackConfig()
        cal = cfg.calibrations[0]
        span = voltage_to_phase(cal, cfg.v_max(1)) - voltage_to_phase(cal, cfg.v_floor(1))
        assert span >= 2 * math.pi


def test_trace_csv(tmp_path):
    cfg = FeedbackConfig(max_cycles=2)
    result = run_feedback(Surface(DriftParams(0.6, 1.0)), start_state(cfg), cfg)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, result.trace, {"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=1"
    rows = list(csv.reader(lines[1:]))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) - 1 == len(result.trace)
    assert [int(r[0]) for r in rows[1:]] == sorted(int(r[0]) for r in rows[1:])


def test_random_scrambles_expectation_mode():
    r = recovery_trials(scenario_from_dict({"kind": "scramble", "seed": 5, "mode": "expect"}), trials=100)
    assert r["converged"] >= 95
    assert all(x["evaluations"] <= 500 for x in r["results"])
    for x in r["results"]:
        if x["converged"]:
            assert x["e_z"] <= 0.015 and x["e_x"] <= 0.015


def test_monte_carlo_recovery_is_minute_scale():
    r = recovery_trials(scenario_from_dict({"kind": "scramble", "seed": 6}), trials=30)
    # one-second windows: a typical recovery takes tens of seconds to a few minutes
    assert 10.0 <= r["median_seconds"] <= 300.0
