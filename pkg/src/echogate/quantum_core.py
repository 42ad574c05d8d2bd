"""Exact single-ion dynamics for a three-level ion (ground / excited / shelf).

The state is a 3x3 density matrix in the basis (g, e, a) where `a` is a
long-lived auxiliary shelf used to park deselected population.  Drive pulses
act on the (g, e) optical transition through the closed-form generalized-Rabi
rotation; free evolution applies detuning phase, T2 coherence decay and T1
population decay with a configurable branching ratio to the shelf; pump steps
model a wait-for-decay reset between preparation repetitions.

Unit conventions, used everywhere in this package:

* frequencies (Rabi, detuning) in Hz, i.e. cycles per second;
* durations in seconds; phases in radians;
* pulse area in cycles: area = rabi_hz * duration_s, so area 0.5 is a pi
  pulse and area 1.0 a 2*pi pulse;
* all angular 2*pi factors live inside the propagators, never in stored data.

A coherence rho_ge of an ion detuned by delta rotates as exp(-2j*pi*delta*t)
under free evolution.  Drive pulses rotate the (g, e) Bloch vector
right-handed by 2*pi*sqrt(W)*t about (Omega*cos(phi), Omega*sin(phi), delta),
W = Omega^2 + delta^2, which reduces to the same phase convention when
Omega = 0.

The module exposes a scalar API operating on :class:`DensityMatrix3` plus
batched kernels on ``(n, 3, 3)`` complex arrays; the scalar operations are
thin wrappers over the batched ones so there is a single implementation.
All operations are pure functions; nothing here holds shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Basis indices: ground, excited, auxiliary shelf.
G, E, A = 0, 1, 2

# Invariant tolerances for DensityMatrix3.validate().
HERMITICITY_TOL = 1e-12
TRACE_TOL = 1e-10
PSD_TOL = 1e-10

TWO_PI = 2.0 * math.pi


class InvalidParameterError(ValueError):
    """An operation received a non-finite or out-of-range input."""


class InvalidStateError(ValueError):
    """A density matrix violates its invariants."""


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidParameterError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Pulse:
    """One piecewise-constant drive segment on an optical channel.

    ``rabi_hz`` is the nominal Rabi frequency (cycles/s); the per-ion
    effective Rabi frequency is scaled by the ion's beam-position factor at
    application time.  ``extra_detuning_hz`` offsets the drive carrier from
    the channel's line centre; ``phase_rad`` is the drive phase about which
    the rotation axis lies in the equatorial plane.
    """

    rabi_hz: float
    duration_s: float
    phase_rad: float = 0.0
    extra_detuning_hz: float = 0.0

    def __post_init__(self) -> None:
        _require_finite(
            rabi_hz=self.rabi_hz,
            duration_s=self.duration_s,
            phase_rad=self.phase_rad,
            extra_detuning_hz=self.extra_detuning_hz,
        )
        if self.rabi_hz < 0:
            raise InvalidParameterError(f"rabi_hz must be >= 0, got {self.rabi_hz}")
        if self.duration_s < 0:
            raise InvalidParameterError(f"duration_s must be >= 0, got {self.duration_s}")

    @property
    def area_cycles(self) -> float:
        return self.rabi_hz * self.duration_s

    @classmethod
    def from_area(
        cls,
        area_cycles: float,
        rabi_hz: float,
        phase_rad: float = 0.0,
        extra_detuning_hz: float = 0.0,
    ) -> "Pulse":
        """Pulse of a given area (0.5 = pi, 1.0 = 2*pi) at a given Rabi rate."""
        if rabi_hz <= 0:
            raise InvalidParameterError("from_area requires rabi_hz > 0")
        return cls(rabi_hz, area_cycles / rabi_hz, phase_rad, extra_detuning_hz)

    def split(self, t_s: float) -> tuple["Pulse", "Pulse"]:
        """Split into two back-to-back segments; exact by pulse composition."""
        if not 0.0 <= t_s <= self.duration_s:
            raise InvalidParameterError(f"split point {t_s} outside [0, {self.duration_s}]")
        head = Pulse(self.rabi_hz, t_s, self.phase_rad, self.extra_detuning_hz)
        tail = Pulse(self.rabi_hz, self.duration_s - t_s, self.phase_rad, self.extra_detuning_hz)
        return head, tail


@dataclass(frozen=True)
class RelaxationParams:
    """Relaxation constants of the optical transition.

    Defaults: T2 = 1/(pi * 100 Hz) from the 100 Hz homogeneous linewidth;
    T1 = 2 ms (configurable, typical for this transition); half of every
    spontaneous decay lands on the auxiliary shelf.  ``math.inf`` disables a
    channel.
    """

    T1_s: float = 2e-3
    T2_s: float = 1.0 / (math.pi * 100.0)
    branch_aux: float = 0.5

    def __post_init__(self) -> None:
        if not (self.T1_s > 0 and self.T2_s > 0):
            raise InvalidParameterError("T1_s and T2_s must be positive (inf allowed)")
        if math.isnan(self.T1_s) or math.isnan(self.T2_s):
            raise InvalidParameterError("T1_s and T2_s must not be NaN")
        if not 0.0 <= self.branch_aux <= 1.0:
            raise InvalidParameterError(f"branch_aux must be in [0, 1], got {self.branch_aux}")
        if self.T2_s > 2.0 * self.T1_s:
            raise InvalidParameterError(
                f"T2_s={self.T2_s} exceeds 2*T1_s={2 * self.T1_s}: unphysical"
            )

    @classmethod
    def lossless(cls) -> "RelaxationParams":
        return cls(T1_s=math.inf, T2_s=math.inf, branch_aux=0.0)


@dataclass(frozen=True)
class DensityMatrix3:
    """3x3 complex density matrix of one ion, basis order (g, e, a).

    Instances are immutable value types; every operation returns a new one.
    """

    rho: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.array(self.rho, dtype=np.complex128, copy=True)
        if arr.shape != (3, 3):
            raise InvalidStateError(f"state must be 3x3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr.view(np.float64))):
            raise InvalidStateError("state contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "rho", arr)

    @classmethod
    def ground(cls) -> "DensityMatrix3":
        rho = np.zeros((3, 3), dtype=np.complex128)
        rho[G, G] = 1.0
        return cls(rho)

    @classmethod
    def from_populations(cls, p_g: float, p_e: float, p_a: float) -> "DensityMatrix3":
        return cls(np.diag([p_g, p_e, p_a]).astype(np.complex128))

    @classmethod
    def pure(cls, amplitudes) -> "DensityMatrix3":
        """Pure state from a 3-component amplitude vector (normalized here)."""
        v = np.asarray(amplitudes, dtype=np.complex128).reshape(3)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise InvalidStateError("zero amplitude vector")
        v = v / norm
        return cls(np.outer(v, v.conj()))

    @property
    def populations(self) -> np.ndarray:
        return self.rho.diagonal().real.copy()

    @property
    def coherence_ge(self) -> complex:
        return complex(self.rho[G, E])

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.rho - self.rho.conj().T).max())

    def trace_defect(self) -> float:
        return float(abs(self.rho.trace().real - 1.0) + abs(self.rho.trace().imag))

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.rho + self.rho.conj().T)
        return float(np.linalg.eigvalsh(herm).min())

    def validate(
        self,
        hermiticity_tol: float = HERMITICITY_TOL,
        trace_tol: float = TRACE_TOL,
        psd_tol: float = PSD_TOL,
    ) -> None:
        """Raise :class:`InvalidStateError` unless all invariants hold."""
        d = self.hermiticity_defect()
        if d > hermiticity_tol:
            raise InvalidStateError(f"hermiticity defect {d:.3e} > {hermiticity_tol}")
        d = self.trace_defect()
        if d > trace_tol:
            raise InvalidStateError(f"trace defect {d:.3e} > {trace_tol}")
        lam = self.min_eigenvalue()
        if lam < -psd_tol:
            raise InvalidStateError(f"smallest eigenvalue {lam:.3e} < -{psd_tol}")


# ---------------------------------------------------------------------------
# Batched kernels on (n, 3, 3) arrays.  These are the single implementation
# the scalar API delegates to; the ensemble engine calls them directly.
# ---------------------------------------------------------------------------


def ground_batch(n: int) -> np.ndarray:
    rho = np.zeros((n, 3, 3), dtype=np.complex128)
    rho[:, G, G] = 1.0
    return rho


def drive_propagators(
    rabi_hz,
    detuning_hz,
    phase_rad,
    duration_s: float,
) -> np.ndarray:
    """Closed-form generalized-Rabi propagators, shape (n, 3, 3).

    Rotation angle 2*pi*sqrt(Omega^2 + delta^2)*t about the axis
    (Omega cos(phi), Omega sin(phi), delta) on the (g, e) subspace; identity
    on the shelf.  The degenerate Omega = delta = 0 case is the identity for
    any duration.
    """
    omega = np.atleast_1d(np.asarray(rabi_hz, dtype=np.float64))
    delta = np.atleast_1d(np.asarray(detuning_hz, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phase_rad, dtype=np.float64))
    omega, delta, phi = np.broadcast_arrays(omega, delta, phi)
    n = omega.shape[0]

    w = np.hypot(omega, delta)
    half_angle = math.pi * w * duration_s
    cos_a = np.cos(half_angle)
    sin_a = np.sin(half_angle)
    safe_w = np.where(w == 0.0, 1.0, w)
    nz = np.where(w == 0.0, 0.0, delta / safe_w)
    nxy = np.where(w == 0.0, 0.0, omega / safe_w)

    u = np.zeros((n, 3, 3), dtype=np.complex128)
    u[:, G, G] = cos_a - 1j * sin_a * nz
    u[:, E, E] = cos_a + 1j * sin_a * nz
    off = -1j * sin_a * nxy
    u[:, G, E] = off * np.exp(-1j * phi)
    u[:, E, G] = off * np.exp(1j * phi)
    u[:, A, A] = 1.0
    return u


def conjugate_states(u: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """U rho U^dagger per batch entry, re-hermitized against FP drift."""
    out = u @ rho @ u.conj().transpose(0, 2, 1)
    return 0.5 * (out + out.conj().transpose(0, 2, 1))


def evolve_free_batch(
    rho: np.ndarray,
    phase_cycles,
    t1_factor,
    t2_factor,
    branch_aux: float,
) -> np.ndarray:
    """Free evolution with pre-integrated detuning phase.

    ``phase_cycles`` is the time integral of the instantaneous detuning in
    Hz*s; rho_ge is multiplied by exp(-2j*pi*phase_cycles) * t2_factor.  The
    excited population decays by ``t1_factor``; the decayed part splits
    branch_aux to the shelf and the rest back to ground.  The e-a coherence
    carries the conjugate optical phase and the same T2 envelope; the g-a
    (spin) coherence is kept lossless on these time scales.
    """
    out = rho.copy()
    pe = out[:, E, E].real
    decayed = pe * (1.0 - t1_factor)
    out[:, E, E] = pe * t1_factor
    out[:, G, G] = out[:, G, G].real + (1.0 - branch_aux) * decayed
    out[:, A, A] = out[:, A, A].real + branch_aux * decayed

    ge_factor = np.exp(-2j * math.pi * np.asarray(phase_cycles)) * t2_factor
    out[:, G, E] *= ge_factor
    out[:, E, G] *= np.conj(ge_factor)
    out[:, E, A] *= np.conj(ge_factor)
    out[:, A, E] *= ge_factor
    return out


def pump_batch(rho: np.ndarray, branch_aux: float) -> np.ndarray:
    """Wait-for-decay reset: shelve/return all excited population, kill coherences."""
    n = rho.shape[0]
    out = np.zeros_like(rho)
    pe = rho[:, E, E].real
    out[:, G, G] = rho[:, G, G].real + (1.0 - branch_aux) * pe
    out[:, A, A] = rho[:, A, A].real + branch_aux * pe
    return out


def excited_population_integral_driven(
    rho: np.ndarray,
    rabi_hz,
    detuning_hz,
    phase_rad,
    duration_s: float,
) -> np.ndarray:
    """Exact integral of P_e(t) over one constant-drive segment, shape (n,).

    Under a constant drive the (g, e) Bloch vector rotates uniformly, so
    z(t) = n_z (n.r0) + (z0 - n_z (n.r0)) cos(wt) + (n x r0)_z sin(wt) with
    w = 2*pi*sqrt(Omega^2 + delta^2); P_e = (tr_ge - z)/2 integrates in
    closed form.  Valid for subnormalized (g, e) blocks: the expression is
    linear in the Bloch components and the block trace is drive-invariant.
    """
    omega = np.atleast_1d(np.asarray(rabi_hz, dtype=np.float64))
    delta = np.atleast_1d(np.asarray(detuning_hz, dtype=np.float64))
    phi = np.atleast_1d(np.asarray(phase_rad, dtype=np.float64))
    omega, delta, phi = np.broadcast_arrays(omega, delta, phi)

    x0 = 2.0 * rho[:, G, E].real
    y0 = -2.0 * rho[:, G, E].imag
    z0 = rho[:, G, G].real - rho[:, E, E].real
    block_trace = rho[:, G, G].real + rho[:, E, E].real

    w = np.hypot(omega, delta)
    safe_w = np.where(w == 0.0, 1.0, w)
    nx = np.where(w == 0.0, 0.0, omega * np.cos(phi) / safe_w)
    ny = np.where(w == 0.0, 0.0, omega * np.sin(phi) / safe_w)
    nz = np.where(w == 0.0, 1.0, delta / safe_w)

    ndotr = nx * x0 + ny * y0 + nz * z0
    cross_z = nx * y0 - ny * x0
    omega_ang = TWO_PI * w
    angle = omega_ang * duration_s
    # int cos(wt) dt and int sin(wt) dt with w -> 0 limits.
    small = w == 0.0
    safe_ang = np.where(small, 1.0, omega_ang)
    int_cos = np.where(small, duration_s, np.sin(angle) / safe_ang)
    int_sin = np.where(small, 0.0, (1.0 - np.cos(angle)) / safe_ang)

    int_z = nz * ndotr * duration_s + (z0 - nz * ndotr) * int_cos + cross_z * int_sin
    return 0.5 * (block_trace * duration_s - int_z)


def excited_population_integral_decay(
    rho: np.ndarray, t1_s: float, duration_s: float
) -> np.ndarray:
    """Integral of P_e(t) = P_e(0) exp(-t/T1) over an idle segment, shape (n,)."""
    pe0 = rho[:, E, E].real
    if math.isinf(t1_s):
        return pe0 * duration_s
    return pe0 * t1_s * (1.0 - math.exp(-duration_s / t1_s))


# ---------------------------------------------------------------------------
# Scalar operations.
# ---------------------------------------------------------------------------


def apply_pulse(
    state: DensityMatrix3,
    pulse: Pulse,
    ion_detuning_hz: float,
    rabi_scale: float,
) -> DensityMatrix3:
    """Unitary generalized-Rabi rotation on the (g, e) subspace.

    Effective Rabi frequency is ``pulse.rabi_hz * rabi_scale``; the effective
    detuning is ``ion_detuning_hz - pulse.extra_detuning_hz``.  Relaxation is
    not applied during pulses (they are orders of magnitude shorter than T2).
    """
    _require_finite(ion_detuning_hz=ion_detuning_hz, rabi_scale=rabi_scale)
    if rabi_scale < 0:
        raise InvalidParameterError(f"rabi_scale must be >= 0, got {rabi_scale}")
    u = drive_propagators(
        pulse.rabi_hz * rabi_scale,
        ion_detuning_hz - pulse.extra_detuning_hz,
        pulse.phase_rad,
        pulse.duration_s,
    )
    return DensityMatrix3(conjugate_states(u, state.rho[np.newaxis])[0])


def free_evolve(
    state: DensityMatrix3,
    duration_s: float,
    ion_detuning_hz: float,
    relax: RelaxationParams,
) -> DensityMatrix3:
    """Free evolution at fixed detuning with T1/T2 relaxation."""
    _require_finite(duration_s=duration_s, ion_detuning_hz=ion_detuning_hz)
    if duration_s < 0:
        raise InvalidParameterError(f"duration_s must be >= 0, got {duration_s}")
    t1f = 1.0 if math.isinf(relax.T1_s) else math.exp(-duration_s / relax.T1_s)
    t2f = 1.0 if math.isinf(relax.T2_s) else math.exp(-duration_s / relax.T2_s)
    out = evolve_free_batch(
        state.rho[np.newaxis],
        np.asarray([ion_detuning_hz * duration_s]),
        t1f,
        t2f,
        relax.branch_aux,
    )
    return DensityMatrix3(out[0])


def pump_cycle(state: DensityMatrix3, branch_aux: float) -> DensityMatrix3:
    """One complete optical-pump reset between preparation repetitions.

    All excited population is transferred (branch_aux to the shelf, the rest
    to ground) and every coherence is destroyed; populations already in g or
    a are untouched, so the step is idempotent.
    """
    _require_finite(branch_aux=branch_aux)
    if not 0.0 <= branch_aux <= 1.0:
        raise InvalidParameterError(f"branch_aux must be in [0, 1], got {branch_aux}")
    return DensityMatrix3(pump_batch(state.rho[np.newaxis], branch_aux)[0])
