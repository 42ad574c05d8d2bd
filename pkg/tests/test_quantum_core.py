"""Single-ion propagator contracts: analytic examples, invariants, and the
brute-force integrator oracle."""

import math

import numpy as np
import pytest

from echogate import (
    DensityMatrix3,
    InvalidParameterError,
    Pulse,
    RelaxationParams,
    apply_pulse,
    free_evolve,
    pump_cycle,
)
from echogate.quantum_core import A, E, G, drive_propagators


def rk4_propagator(rabi_hz, detuning_hz, phase_rad, duration_s, max_step_s=1e-9):
    """Independent fine-step integrator of the rotating-frame Schroedinger
    equation dU/dt = -i H U with H = pi (Omega cos(phi) sx + Omega sin(phi) sy
    + delta sz), vectorized over parameter draws.  RK4; every draw uses its
    own step size <= max_step_s (shared step count for vectorization)."""
    rabi = np.atleast_1d(np.asarray(rabi_hz, float))
    det = np.atleast_1d(np.asarray(detuning_hz, float))
    phi = np.atleast_1d(np.asarray(phase_rad, float))
    dur = np.atleast_1d(np.asarray(duration_s, float))
    rabi, det, phi, dur = np.broadcast_arrays(rabi, det, phi, dur)
    n = rabi.shape[0]

    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    h = math.pi * (
        (rabi * np.cos(phi))[:, None, None] * sx
        + (rabi * np.sin(phi))[:, None, None] * sy
        + det[:, None, None] * sz
    )

    steps = max(1, math.ceil(float(dur.max()) / max_step_s))
    dt = (dur / steps)[:, None, None]
    u = np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
    minus_ih = -1j * h
    for _ in range(steps):
        k1 = minus_ih @ u
        k2 = minus_ih @ (u + 0.5 * dt * k1)
        k3 = minus_ih @ (u + 0.5 * dt * k2)
        k4 = minus_ih @ (u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


LOSSLESS = RelaxationParams.lossless()


class TestApplyPulse:
    def test_resonant_pi_pulse_inverts(self):
        out = apply_pulse(DensityMatrix3.ground(), Pulse.from_area(0.5, 1e6), 0.0, 1.0)
        assert out.populations[E] == pytest.approx(1.0, abs=1e-12)

    def test_zero_duration_is_identity(self):
        state = DensityMatrix3.pure([1.0, 0.5j, 0.2])
        out = apply_pulse(state, Pulse(2e6, 0.0, 0.3), 12e3, 1.1)
        np.testing.assert_allclose(out.rho, state.rho, atol=1e-15)

    def test_detuned_generalized_rabi_population(self):
        # Omega = delta = 100 kHz, 5 us: P_e = (O^2/W^2) sin^2(pi W t),
        # cross-checked against the fine-step integrator below.
        omega, delta, t = 100e3, 100e3, 5e-6
        out = apply_pulse(DensityMatrix3.ground(), Pulse(omega, t), delta, 1.0)
        w = math.hypot(omega, delta)
        expected = (omega**2 / w**2) * math.sin(math.pi * w * t) ** 2
        assert out.populations[E] == pytest.approx(expected, abs=1e-12)

        u = rk4_propagator(omega, delta, 0.0, t)[0]
        rho = u @ DensityMatrix3.ground().rho[:2, :2] @ u.conj().T
        assert out.populations[E] == pytest.approx(rho[1, 1].real, abs=1e-8)

    def test_resonant_two_pi_returns_to_ground(self):
        out = apply_pulse(DensityMatrix3.ground(), Pulse.from_area(1.0, 1e6), 0.0, 1.0)
        assert out.populations[G] == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_zero_drive_zero_detuning_is_identity(self):
        state = DensityMatrix3.pure([1.0, 1.0, 0.0])
        out = apply_pulse(state, Pulse(0.0, 3e-6), 0.0, 0.0)
        np.testing.assert_allclose(out.rho, state.rho, atol=1e-15)

    def test_auxiliary_population_untouched(self):
        state = DensityMatrix3.from_populations(0.3, 0.2, 0.5)
        out = apply_pulse(state, Pulse.from_area(0.37, 1e6, 0.7), 40e3, 0.9)
        assert out.populations[A] == pytest.approx(0.5, abs=1e-13)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidParameterError):
            apply_pulse(DensityMatrix3.ground(), Pulse(1e6, 1e-6), math.nan, 1.0)
        with pytest.raises(InvalidParameterError):
            Pulse(math.inf, 1e-6)

    def test_composition(self):
        # two back-to-back segments equal one pulse of the summed duration
        rng = np.random.default_rng(11)
        for _ in range(50):
            omega = rng.uniform(0, 1e6)
            delta = rng.uniform(-1e6, 1e6)
            phi = rng.uniform(-math.pi, math.pi)
            t1, t2 = rng.uniform(0, 5e-6, 2)
            state = DensityMatrix3.pure(rng.standard_normal(3) + 1j * rng.standard_normal(3))
            a = apply_pulse(state, Pulse(omega, t1, phi), delta, 1.0)
            a = apply_pulse(a, Pulse(omega, t2, phi), delta, 1.0)
            b = apply_pulse(state, Pulse(omega, t1 + t2, phi), delta, 1.0)
            assert np.abs(a.rho - b.rho).max() <= 1e-10

    def test_unitarity_preserves_spectrum_and_trace(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            state = DensityMatrix3.pure(rng.standard_normal(3) + 1j * rng.standard_normal(3))
            mixed = DensityMatrix3(0.6 * state.rho + 0.4 * np.diag([0.5, 0.3, 0.2]))
            out = apply_pulse(
                mixed,
                Pulse(rng.uniform(0, 1e6), rng.uniform(0, 5e-6), rng.uniform(-3, 3)),
                rng.uniform(-5e5, 5e5),
                rng.uniform(0.2, 2.0),
            )
            before = np.linalg.eigvalsh(mixed.rho)
            after = np.linalg.eigvalsh(out.rho)
            assert np.abs(before - after).max() <= 1e-10
            assert abs(out.rho.trace() - mixed.rho.trace()) <= 1e-10
            out.validate()


def test_propagator_matches_integrator_1000_draws():
    """Oracle equivalence: closed form vs RK4 (<= 1 ns steps), max error 1e-8."""
    rng = np.random.default_rng(2026)
    n = 1000
    omega = rng.uniform(0.0, 1e6, n)
    delta = rng.uniform(-1e6, 1e6, n)
    phi = rng.uniform(-math.pi, math.pi, n)
    durations = rng.uniform(0.0, 10e-6, n)

    # random pure initial states on the (g, e) subspace
    amps = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    amps /= np.linalg.norm(amps, axis=1, keepdims=True)
    rho0 = amps[:, :, None] * amps.conj()[:, None, :]

    u_ref = rk4_propagator(omega, delta, phi, durations)
    rho_ref = u_ref @ rho0 @ u_ref.conj().transpose(0, 2, 1)

    u_closed = np.empty_like(u_ref)
    for k in range(n):
        u_closed[k] = drive_propagators(omega[k], delta[k], phi[k], float(durations[k]))[0, :2, :2]
    rho_closed = u_closed @ rho0 @ u_closed.conj().transpose(0, 2, 1)

    worst = float(np.abs(rho_ref - rho_closed).max())
    print(f"propagator oracle: max |rho_closed - rho_rk4| = {worst:.3e}")
    assert worst <= 1e-8


class TestFreeEvolve:
    def test_phase_rotation_half_turn(self):
        # rho_ge = 0.5, delta = 50 kHz, t = 10 us -> phase -pi -> -0.5
        state = DensityMatrix3.pure([1.0, 1.0, 0.0])
        out = free_evolve(state, 10e-6, 50e3, LOSSLESS)
        assert out.coherence_ge.real == pytest.approx(-0.5, abs=1e-12)
        assert out.coherence_ge.imag == pytest.approx(0.0, abs=1e-12)

    def test_zero_duration_identity(self):
        state = DensityMatrix3.pure([1.0, 0.3 + 0.1j, 0.2])
        out = free_evolve(state, 0.0, 123e3, RelaxationParams())
        np.testing.assert_allclose(out.rho, state.rho, atol=1e-15)

    def test_t1_decay_with_branching(self):
        # P_e = 1, T1 = 2 ms, t = 2 ms, b = 0.5: P_e = e^-1, split evenly
        out = free_evolve(
            DensityMatrix3.from_populations(0.0, 1.0, 0.0),
            2e-3,
            0.0,
            RelaxationParams(T1_s=2e-3, T2_s=4e-3, branch_aux=0.5),
        )
        p = out.populations
        assert p[E] == pytest.approx(math.exp(-1.0), abs=1e-9)
        assert p[G] == pytest.approx((1.0 - math.exp(-1.0)) / 2.0, abs=1e-9)
        assert p[A] == pytest.approx((1.0 - math.exp(-1.0)) / 2.0, abs=1e-9)
        assert out.trace_defect() <= 1e-10

    def test_t1_decay_matches_fine_step_integration(self):
        # cross-check the closed-form exponential against stepwise composition
        relax = RelaxationParams(T1_s=1.3e-3, T2_s=2e-3, branch_aux=0.3)
        coarse = free_evolve(DensityMatrix3.from_populations(0.1, 0.9, 0.0), 1e-3, 20e3, relax)
        fine = DensityMatrix3.from_populations(0.1, 0.9, 0.0)
        for _ in range(1000):
            fine = free_evolve(fine, 1e-6, 20e3, relax)
        assert np.abs(coarse.rho - fine.rho).max() <= 1e-9

    def test_lossless_is_unitary_on_ge(self):
        state = DensityMatrix3.pure([1.0, 1.0j, 0.0])
        out = free_evolve(state, 7e-6, 33e3, LOSSLESS)
        assert abs(out.coherence_ge) == pytest.approx(0.5, abs=1e-12)
        np.testing.assert_allclose(out.populations, state.populations, atol=1e-12)

    def test_negative_duration_rejected(self):
        with pytest.raises(InvalidParameterError):
            free_evolve(DensityMatrix3.ground(), -1e-9, 0.0, LOSSLESS)

    def test_trace_preserved_under_decay(self):
        rng = np.random.default_rng(5)
        state = DensityMatrix3.from_populations(0.2, 0.7, 0.1)
        for _ in range(20):
            state = free_evolve(state, rng.uniform(0, 1e-3), rng.uniform(-1e5, 1e5),
                                RelaxationParams(T1_s=2e-3, T2_s=3e-3, branch_aux=0.4))
        assert state.trace_defect() <= 1e-10
        state.validate()


class TestPumpCycle:
    def test_full_shelving(self):
        out = pump_cycle(DensityMatrix3.from_populations(0.0, 1.0, 0.0), 1.0)
        np.testing.assert_allclose(out.populations, [0.0, 0.0, 1.0], atol=1e-15)

    def test_ground_state_unchanged(self):
        out = pump_cycle(DensityMatrix3.ground(), 0.37)
        np.testing.assert_allclose(out.populations, [1.0, 0.0, 0.0], atol=1e-15)

    def test_partial_branch_arithmetic(self):
        out = pump_cycle(DensityMatrix3.from_populations(0.25, 0.5, 0.25), 0.6)
        np.testing.assert_allclose(out.populations, [0.45, 0.0, 0.55], atol=1e-15)

    def test_kills_all_coherences(self):
        state = DensityMatrix3.pure([1.0, 1.0, 1.0])
        out = pump_cycle(state, 0.5)
        off = out.rho - np.diag(out.rho.diagonal())
        assert np.abs(off).max() == 0.0

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            state = DensityMatrix3.pure(rng.standard_normal(3) + 1j * rng.standard_normal(3))
            once = pump_cycle(state, 0.7)
            twice = pump_cycle(once, 0.7)
            np.testing.assert_allclose(twice.rho, once.rho, atol=1e-15)

    def test_branch_range_checked(self):
        with pytest.raises(InvalidParameterError):
            pump_cycle(DensityMatrix3.ground(), 1.5)


class TestRelaxationParams:
    def test_default_t2_from_homogeneous_linewidth(self):
        assert RelaxationParams().T2_s == pytest.approx(1.0 / (math.pi * 100.0))

    def test_t2_bound(self):
        with pytest.raises(InvalidParameterError):
            RelaxationParams(T1_s=1e-3, T2_s=3e-3)

    def test_infinite_lifetimes_allowed(self):
        RelaxationParams(T1_s=math.inf, T2_s=math.inf, branch_aux=0.0)


class TestDensityMatrixInvariants:
    def test_validate_passes_for_physical_states(self):
        DensityMatrix3.ground().validate()
        DensityMatrix3.pure([1, 1j, 0.5]).validate()

    def test_validate_rejects_nonhermitian(self):
        rho = np.eye(3, dtype=complex)
        rho[0, 1] = 0.5
        with pytest.raises(Exception):
            DensityMatrix3(rho / rho.trace()).validate()

    def test_validate_rejects_bad_trace(self):
        with pytest.raises(Exception):
            DensityMatrix3(np.diag([0.5, 0.3, 0.0]).astype(complex)).validate()
