"""Echo synthesis and I/Q metrics: peak location, envelope width, phase
conventions, linearity, and serialization."""

import math

import numpy as np
import pytest

from echogate import (
    EchoTrace,
    EchoWindow,
    EnsembleSpec,
    InvalidParameterError,
    IonPairParams,
    Pulse,
    RelaxationParams,
    WindowRangeError,
    echo_metrics,
    echo_signal,
    make_echo_timeline,
    phase_shift_between,
    sample_ensemble,
)
from echogate.detection import (
    envelope_fwhm_from_trace,
    gaussian_envelope_fwhm_s,
    wrap_degrees,
)

LOSSLESS = RelaxationParams.lossless()


def _gaussian_trace(phase_rad=0.0, center=40e-6, sigma=3e-6, n=161, mag=1.0, meta=None):
    t = np.linspace(center - 20e-6, center + 20e-6, n)
    amp = mag * np.exp(-((t - center) ** 2) / (2 * sigma**2)) * np.exp(1j * phase_rad)
    return EchoTrace(t, amp, meta or {"weight_sum": 2 * mag})


class TestEchoSignal:
    def test_single_pair_constant_amplitude_after_half_pulse(self):
        # one resonant ion after just a pi/2: |amplitude| = 0.5 * weight
        events = [
            __import__("echogate.protocols", fromlist=["target_pulse"]).target_pulse(
                Pulse.from_area(0.25, 1e6)
            ),
            __import__("echogate.protocols", fromlist=["delay"]).delay(40e-6),
        ]
        pair = IonPairParams(0.0, 0.0, 1.0, 1.0, 0.0, weight=0.8)
        win = EchoWindow(5e-6, 35e-6, 1e-6)
        trace = echo_signal([pair], events, LOSSLESS, win)
        np.testing.assert_allclose(trace.magnitude, 0.5 * 0.8, atol=1e-12)

    def test_ensemble_echo_peaks_at_two_tau(self):
        tau = 20e-6
        tl = make_echo_timeline(tau, target_rabi_hz=1e6)
        pairs = sample_ensemble(EnsembleSpec(n_pairs=10_000, antihole_fwhm_hz=100e3, rng_seed=21))
        win = EchoWindow.centered(tl.expected_echo_time_s, 15e-6, 0.25e-6)
        trace = echo_signal(pairs, tl, RelaxationParams(), win)
        m = echo_metrics(trace, tl.expected_echo_time_s)
        assert abs(m.peak_time_s - tl.expected_echo_time_s) <= win.dt_s + 1e-15
        assert not m.no_echo

    def test_envelope_fwhm_matches_fourier_prediction(self):
        tau = 20e-6
        tl = make_echo_timeline(tau, target_rabi_hz=1e6)
        pairs = sample_ensemble(EnsembleSpec(n_pairs=20_000, antihole_fwhm_hz=100e3, rng_seed=22))
        win = EchoWindow.centered(tl.expected_echo_time_s, 15e-6, 0.25e-6)
        trace = echo_signal(pairs, tl, LOSSLESS, win)
        m = echo_metrics(trace, tl.expected_echo_time_s)
        predicted = gaussian_envelope_fwhm_s(100e3)
        measured = envelope_fwhm_from_trace(trace, m.peak_time_s)
        print(f"echo envelope FWHM: measured {measured * 1e6:.2f} us, predicted {predicted * 1e6:.2f} us")
        assert measured == pytest.approx(predicted, rel=0.10)

    def test_window_outside_span_rejected(self):
        tl = make_echo_timeline(20e-6)
        pair = IonPairParams(0.0, 0.0, 1.0, 1.0, 0.0)
        with pytest.raises(WindowRangeError):
            echo_signal([pair], tl, LOSSLESS, EchoWindow(0.0, 10e-6, 1e-6))

    def test_linearity_over_disjoint_ensembles(self):
        tl = make_echo_timeline(15e-6)
        a = sample_ensemble(EnsembleSpec(n_pairs=300, rng_seed=31))
        b = sample_ensemble(EnsembleSpec(n_pairs=300, rng_seed=32))
        win = EchoWindow.centered(tl.expected_echo_time_s, 8e-6, 0.5e-6)
        ta = echo_signal(a, tl, RelaxationParams(), win)
        tb = echo_signal(b, tl, RelaxationParams(), win)
        tab = echo_signal(a + b, tl, RelaxationParams(), win)
        scale = np.abs(tab.amplitude).max()
        assert np.abs(tab.amplitude - (ta.amplitude + tb.amplitude)).max() <= 1e-12 * scale

    def test_global_phase_closure(self):
        # rotating the drive reference phase (every pulse on both channels)
        # shifts every echo phase by the same amount and leaves
        # phase_shift_between unchanged; exact for arbitrary ensembles
        from echogate.protocols import PerturbSpec, SequenceEvent

        def rotated(events, alpha):
            out = []
            for ev in events:
                tp = ev.target
                cp = ev.control
                if tp is not None:
                    tp = Pulse(tp.rabi_hz, tp.duration_s, tp.phase_rad + alpha, tp.extra_detuning_hz)
                if cp is not None:
                    cp = Pulse(cp.rabi_hz, cp.duration_s, cp.phase_rad + alpha, cp.extra_detuning_hz)
                out.append(SequenceEvent(ev.duration_s, tp, cp))
            return out

        tau = 15e-6
        alpha = 0.7
        pairs = sample_ensemble(EnsembleSpec(n_pairs=200, rng_seed=33))
        tl_off = make_echo_timeline(tau)
        tl_on = make_echo_timeline(
            tau, perturb=PerturbSpec(Pulse.from_area(0.5, 1e6), "with_rephasing")
        )
        win = EchoWindow.centered(tl_off.expected_echo_time_s, 8e-6, 0.5e-6)
        results = []
        for a in (0.0, alpha):
            tr_off = echo_signal(pairs, rotated(tl_off.events, a), RelaxationParams(), win)
            tr_on = echo_signal(pairs, rotated(tl_on.events, a), RelaxationParams(), win)
            m = echo_metrics(tr_off, tl_off.expected_echo_time_s)
            shift = phase_shift_between(tr_off, tr_on, tl_off.expected_echo_time_s)
            results.append((m.phase_deg, shift))
        (p0, s0), (p1, s1) = results
        assert wrap_degrees(p1 - p0) == pytest.approx(math.degrees(alpha), abs=1e-9)
        assert s0 == pytest.approx(s1, abs=1e-9)

    def test_magnitude_invariant_under_iq_relabel_with_quarter_turn(self):
        trace = _gaussian_trace(phase_rad=0.4)
        rotated = EchoTrace(trace.t_s, trace.amplitude * np.exp(-1j * math.pi / 2), trace.metadata)
        swapped = EchoTrace(rotated.t_s, rotated.q + 1j * rotated.i, rotated.metadata)
        np.testing.assert_allclose(swapped.magnitude, trace.magnitude, atol=1e-15)

    def test_noise_option_is_seeded_and_off_by_default(self):
        tl = make_echo_timeline(15e-6)
        pairs = [IonPairParams(0.0, 0.0, 1.0, 1.0, 0.0)]
        win = EchoWindow.centered(tl.expected_echo_time_s, 5e-6, 0.5e-6)
        clean = echo_signal(pairs, tl, LOSSLESS, win)
        noisy1 = echo_signal(pairs, tl, LOSSLESS, win, noise_sigma=0.01, noise_seed=5)
        noisy2 = echo_signal(pairs, tl, LOSSLESS, win, noise_sigma=0.01, noise_seed=5)
        assert np.array_equal(noisy1.amplitude, noisy2.amplitude)
        assert not np.array_equal(clean.amplitude, noisy1.amplitude)


class TestEchoMetrics:
    def test_constructed_trace_phase_and_peak(self):
        # amplitude e^{i pi/9} * gaussian(t - 2 tau): phase 20 deg at 2 tau
        trace = _gaussian_trace(phase_rad=math.pi / 9, center=40e-6)
        m = echo_metrics(trace, 40e-6)
        assert m.phase_deg == pytest.approx(20.0, abs=0.1)
        assert m.peak_time_s == pytest.approx(40e-6, abs=1e-12)
        assert not m.no_echo

    def test_flat_trace_reports_no_echo(self):
        t = np.linspace(0, 10e-6, 51)
        trace = EchoTrace(t, np.zeros(51, complex), {"weight_sum": 1.0})
        m = echo_metrics(trace, 5e-6)
        assert m.no_echo
        assert m.peak_magnitude == 0.0

    def test_search_window_excludes_remote_maxima(self):
        # a larger blob far from the expected time must not win the search
        t = np.linspace(0, 80e-6, 321)
        amp = (
            1.0 * np.exp(-((t - 70e-6) ** 2) / (2 * (2e-6) ** 2))
            + 0.5 * np.exp(-((t - 40e-6) ** 2) / (2 * (3e-6) ** 2))
        ).astype(complex)
        trace = EchoTrace(t, amp, {"weight_sum": 4.0})
        m = echo_metrics(trace, 40e-6, search_halfwidth_s=3 * gaussian_envelope_fwhm_s(100e3))
        assert m.peak_time_s == pytest.approx(40e-6, abs=0.3e-6)

    def test_expected_time_outside_trace_rejected(self):
        trace = _gaussian_trace()
        with pytest.raises(WindowRangeError):
            echo_metrics(trace, 1.0)

    def test_metrics_dict_keys(self):
        m = echo_metrics(_gaussian_trace(), 40e-6)
        assert set(m.to_dict()) == {"peak_magnitude", "peak_time_s", "phase_deg", "no_echo"}


class TestPhaseShiftBetween:
    def test_identical_traces_zero(self):
        tr = _gaussian_trace(phase_rad=0.3)
        assert phase_shift_between(tr, tr, 40e-6) == 0.0

    def test_constructed_twenty_degrees(self):
        a = _gaussian_trace()
        b = EchoTrace(a.t_s, a.amplitude * np.exp(1j * math.pi / 9), a.metadata)
        assert phase_shift_between(a, b, 40e-6) == pytest.approx(20.0, abs=1e-9)

    def test_wrapping_into_half_open_interval(self):
        assert wrap_degrees(190.0) == pytest.approx(-170.0)
        assert wrap_degrees(-190.0) == pytest.approx(170.0)
        assert wrap_degrees(180.0) == pytest.approx(180.0)
        assert wrap_degrees(-180.0) == pytest.approx(180.0)

    def test_no_echo_gives_undefined_phase(self):
        a = _gaussian_trace()
        b = EchoTrace(a.t_s, np.zeros_like(a.amplitude), {"weight_sum": 1.0})
        assert phase_shift_between(a, b, 40e-6) is None

    def test_mismatched_grids_rejected(self):
        a = _gaussian_trace(n=161)
        b = _gaussian_trace(n=81)
        with pytest.raises(InvalidParameterError):
            phase_shift_between(a, b, 40e-6)


class TestTraceSerialization:
    def test_csv_round_trip_is_exact(self, tmp_path):
        trace = _gaussian_trace(phase_rad=1.1)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        back = EchoTrace.from_csv(path)
        assert np.array_equal(back.t_s, trace.t_s)
        assert np.array_equal(back.amplitude, trace.amplitude)

    def test_csv_header_and_format(self, tmp_path):
        trace = _gaussian_trace(n=5)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t_s,I,Q"
        assert len(lines) == 1 + trace.t_s.size
        assert "," in lines[1] and "e" in lines[1].lower()

    def test_grid_validation(self):
        with pytest.raises(InvalidParameterError):
            EchoTrace(np.array([0.0, 1.0, 1.5]), np.zeros(3, complex))
        with pytest.raises(InvalidParameterError):
            EchoTrace(np.array([0.0, 1.0, 0.5]), np.zeros(3, complex))
