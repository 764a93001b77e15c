import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from polqkd.chip import (
    IDEAL_SETTINGS,
    PORTS,
    ERSweep,
    PhaseSettings,
    ShifterCalibration,
    VoltageState,
    apply_voa,
    detection_probabilities,
    extinction_ratio,
    measurement_operator,
    phase_to_voltage,
    port_probability_matrix,
    povm_element,
    settings_from_voltages,
    simulate_mzi_sweep,
    solve_compensation,
    uniform_calibration,
    voltage_to_phase,
    voltages_for_settings,
)
from polqkd.errors import DomainError
from polqkd.polarization import DriftParams, PathState, drifted_bb84, ideal_bb84, is_psd, make_state
from polqkd.reference import POVM_REFERENCE

angle = st.floats(-30, 30, allow_nan=False)
phase_settings = st.builds(PhaseSettings, angle, angle, angle, angle)
amplitude = st.complex_numbers(max_magnitude=5)


def unit_state(a, b):
    if math.hypot(abs(a), abs(b)) < 1e-3:
        return None
    return make_state(a, b)


class TestMeasurementOperators:
    def test_h_port_at_ideal(self):
        m = measurement_operator("H", PhaseSettings(0, math.pi, 0, math.pi / 2))
        np.testing.assert_allclose(m, math.sqrt(0.5) * np.diag([1, 0]), atol=1e-15)

    def test_v_port_at_zero_phase(self):
        m = measurement_operator("V", PhaseSettings(0, 0, 0, 0))
        np.testing.assert_allclose(m, math.sqrt(0.5) * np.diag([1, 0]), atol=1e-15)

    def test_square_gives_povm_element(self):
        s = PhaseSettings(0.3, 1.9, -2.0, 0.4)
        for port in PORTS:
            m = measurement_operator(port, s)
            np.testing.assert_allclose(m.conj().T @ m, povm_element(port, s), atol=1e-14)
            assert is_psd(m)

    @settings(max_examples=100)
    @given(phase_settings)
    def test_completeness(self, s):
        total = sum(povm_element(p, s) for p in PORTS)
        np.testing.assert_allclose(total, np.eye(2), atol=1e-10)

    @given(phase_settings)
    def test_elements_positive(self, s):
        for p in PORTS:
            assert np.linalg.eigvalsh(povm_element(p, s)).min() >= -1e-12

    def test_unknown_port(self):
        with pytest.raises(DomainError):
            povm_element("R", IDEAL_SETTINGS)


class TestDetectionProbabilities:
    @pytest.mark.parametrize("row,state", list(enumerate("HVDA")))
    def test_reference_table(self, row, state):
        p = detection_probabilities(ideal_bb84(state), PhaseSettings(0, math.pi, 0, math.pi / 2))
        np.testing.assert_allclose(p, POVM_REFERENCE[row], atol=1e-12)

    @given(amplitude, amplitude, phase_settings)
    def test_closed_form(self, a, b, s):
        psi = unit_state(a, b)
        if psi is None:
            return
        expected = oracles.port_probs(psi.alpha, psi.beta, s.as_tuple())
        np.testing.assert_allclose(detection_probabilities(psi, s), expected, atol=1e-12)

    @given(amplitude, amplitude, phase_settings)
    def test_normalized_and_bounded(self, a, b, s):
        psi = unit_state(a, b)
        if psi is None:
            return
        p = detection_probabilities(psi, s)
        assert sum(p) == pytest.approx(1.0, abs=1e-12)
        assert all(-1e-15 <= x <= 1 + 1e-15 for x in p)

    @given(amplitude, amplitude, phase_settings, st.integers(0, 3), st.integers(-3, 3))
    def test_two_pi_periodic(self, a, b, s, which, k):
        psi = unit_state(a, b)
        if psi is None:
            return
        shifted = list(s.as_tuple())
        shifted[which] += 2 * math.pi * k
        np.testing.assert_allclose(
            detection_probabilities(psi, s), detection_probabilities(psi, PhaseSettings(*shifted)), atol=1e-12
        )

    @given(amplitude, amplitude, phase_settings)
    def test_trace_invariance(self, a, b, s):
        psi = unit_state(a, b)
        if psi is None:
            return
        perp = PathState(-psi.beta.conjugate(), psi.alpha.conjugate())
        both = np.add(detection_probabilities(psi, s), detection_probabilities(perp, s))
        traces = [np.trace(povm_element(p, s)).real for p in PORTS]
        np.testing.assert_allclose(both, traces, atol=1e-12)

    def test_drifted_h_routed_by_z_compensation(self):
        varphi, phi = 0.37, -2.1
        s = PhaseSettings(phi, math.pi - 2 * varphi, 1.0, 2.0)
        p = detection_probabilities(drifted_bb84("H", DriftParams(varphi, phi)), s)
        assert p.pH == pytest.approx(0.5, abs=1e-12) and p.pV == pytest.approx(0, abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(DomainError):
            detection_probabilities(PathState(1, 1), IDEAL_SETTINGS)

    def test_batch_matches_single(self):
        states = [drifted_bb84(s, DriftParams(0.2, 0.9)) for s in "HVDA"]
        batch = port_probability_matrix(np.array([s.vector for s in states]), IDEAL_SETTINGS)
        for row, psi in zip(batch, states):
            np.testing.assert_allclose(row, detection_probabilities(psi, IDEAL_SETTINGS), atol=1e-15)

    def test_rejects_non_finite_settings(self):
        with pytest.raises(DomainError):
            PhaseSettings(math.nan, 0, 0, 0)


def misrouting(d: DriftParams, s: PhaseSettings) -> float:
    p = {x: detection_probabilities(drifted_bb84(x, d), s) for x in "HVDA"}
    return max(p["H"].pV, p["V"].pH, p["D"].pA, p["A"].pD)


class TestCompensation:
    def test_zero_drift_gives_ideal_settings(self):
        s = solve_compensation(DriftParams())
        np.testing.assert_allclose(s.as_tuple(), (0, math.pi, 0, math.pi / 2), atol=1e-15)

    def test_example_drift(self):
        d = DriftParams(0.3, 1.1)
        s = solve_compensation(d)
        assert misrouting(d, s) < 1e-9
        assert oracles.qber_surface(s.as_tuple(), d.varphi, d.phi)[0] < 1e-9

    @given(angle, angle)
    def test_routes_every_state(self, varphi, phi):
        d = DriftParams(varphi, phi)
        s = solve_compensation(d)
        assert misrouting(d, s) < 1e-9
        for x, port in zip("HVDA", range(4)):
            assert detection_probabilities(drifted_bb84(x, d), s)[port] == pytest.approx(0.5, abs=1e-9)

    @pytest.mark.parametrize("d", [DriftParams(0, 0.7), DriftParams(math.pi / 2, 0), DriftParams(math.pi / 4, math.pi / 2)])
    def test_degenerate_drifts(self, d):
        assert misrouting(d, solve_compensation(d)) < 1e-9

    def test_agrees_with_grid_search(self):
        d = DriftParams(0.8, -2.4)
        s = solve_compensation(d)
        z = oracles.grid_compensation([oracles.drifted(x, d.varphi, d.phi) for x in "HV"])
        x = oracles.grid_compensation([oracles.drifted(x, d.varphi, d.phi) for x in "DA"])
        assert oracles.same_controller_setting(z, (s.theta1, s.theta2), 1e-6)
        assert oracles.same_controller_setting(x, (s.theta3, s.theta4), 1e-6)


class TestActuators:
    def test_half_wave_point(self):
        assert voltage_to_phase(ShifterCalibration(), 0.72) == pytest.approx(math.pi)

    @pytest.mark.parametrize("law", ["quadratic", "linear"])
    def test_zero_volts(self, law):
        assert voltage_to_phase(ShifterCalibration(law=law), 0.0) == 0.0

    def test_quadratic_inverse(self):
        assert voltage_to_phase(ShifterCalibration(), 0.72 / math.sqrt(2)) == pytest.approx(math.pi / 2)

    def test_linear_law(self):
        assert voltage_to_phase(ShifterCalibration(law="linear"), 0.36) == pytest.approx(math.pi / 2)

    def test_negative_voltage(self):
        with pytest.raises(DomainError):
            voltage_to_phase(ShifterCalibration(), -0.1)

    @pytest.mark.parametrize("kwargs", [{"v_pi": 0}, {"law": "cubic"}])
    def test_bad_calibration(self, kwargs):
        with pytest.raises(DomainError):
            ShifterCalibration(**kwargs)

    @given(st.floats(0, 3), st.floats(0, 3))
    def test_monotone(self, v1, v2):
        cal = ShifterCalibration()
        lo, hi = sorted((v1, v2))
        assert voltage_to_phase(cal, lo) <= voltage_to_phase(cal, hi)

    @given(angle, st.sampled_from(["quadratic", "linear"]), st.floats(-3, 3))
    def test_phase_to_voltage_round_trip(self, theta, law, theta0):
        cal = ShifterCalibration(0.72, law, theta0)
        v = phase_to_voltage(cal, theta)
        back = voltage_to_phase(cal, v)
        assert math.cos(back - theta) == pytest.approx(1.0, abs=1e-9)
        assert cal.theta0 + math.pi - 1e-9 <= back < cal.theta0 + 3 * math.pi + 1e-9

    def test_slope_matches_finite_difference(self):
        cal = ShifterCalibration()
        v, h = 0.9, 1e-6
        fd = (voltage_to_phase(cal, v + h) - voltage_to_phase(cal, v - h)) / (2 * h)
        assert cal.slope(v) == pytest.approx(fd, rel=1e-8)

    def test_voltage_state(self):
        vs = VoltageState((0.1, 0.2, 0.3, 0.4))
        assert vs.with_voltage(2, 1.0).v == (0.1, 1.0, 0.3, 0.4)
        with pytest.raises(DomainError):
            VoltageState((0.1, -0.2, 0.3, 0.4))
        with pytest.raises(DomainError):
            VoltageState((0.1, 0.2, 0.3))
        with pytest.raises(DomainError):
            VoltageState(voa_z=-1)

    def test_settings_round_trip_through_voltages(self):
        cals = uniform_calibration()
        s = PhaseSettings(-1.0, 2.0, 5.0, 0.1)
        back = settings_from_voltages(voltages_for_settings(s, cals), cals)
        for a, b in zip(s.as_tuple(), back.as_tuple()):
            assert math.cos(a - b) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("w,db,expected", [(1.0, 3.0103, 0.5), (1.0, 0.0, 1.0), (0.2, 10.0, 0.02)])
    def test_voa(self, w, db, expected):
        assert apply_voa(w, db) == pytest.approx(expected, rel=1e-5)

    def test_voa_rejects_gain(self):
        with pytest.raises(DomainError):
            apply_voa(1.0, -1.0)


class TestExtinction:
    def test_twenty_db(self):
        r = extinction_ratio(ERSweep(((0.0, 100.0), (1.0, 1.0))))
        assert r.er_max == pytest.approx(20.0)
        assert r.curve == pytest.approx([20.0, 0.0])
        assert not r.unbounded

    def test_flat_sweep(self):
        assert extinction_ratio(ERSweep(((0, 5.0), (1, 5.0), (2, 5.0)))).er_max == 0.0

    def test_zero_minimum_is_flagged(self):
        r = extinction_ratio(ERSweep(((0, 0.0), (1, 3.0))))
        assert r.unbounded and math.isinf(r.er_max)

    def test_simulated_static_extinction(self):
        volts = np.linspace(0, 2 * 0.72, 2001)
        r = extinction_ratio(simulate_mzi_sweep(volts))
        assert r.er_max == pytest.approx(28.0, abs=0.5)

    @pytest.mark.parametrize("samples", [((0, 1.0),), ((0, 1.0), (1, -1.0))])
    def test_invalid_sweeps(self, samples):
        with pytest.raises(DomainError):
            ERSweep(samples)
