"""Ensemble echo synthesis and I/Q readout.

The emitted field is the coherent, weight-weighted sum of the pairs' target
optical coherences sampled on a uniform time grid; I and Q are its real and
imaginary parts in the laser frame (the field carries the conjugate of
rho_ge, so a positive conditional frequency shift appears as a positive
phase).  Echo magnitude is the RMS sum of I and Q, i.e. |amplitude|; the
phase is read at the located peak.

Absolute emission strength is not modelled: amplitudes are in arbitrary
units and only ratios and phases are contractual.  Optional seeded Gaussian
noise exists for plot realism and defaults off.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import PairArrays
from .protocols import (
    CouplingModel,
    SequenceError,
    sample_weighted_coherence,
    timeline_duration,
    validate_timeline,
)
from .quantum_core import InvalidParameterError, RelaxationParams

# Peak smaller than this fraction of the theoretical maximum (half the total
# weight) is reported as "no echo".
NO_ECHO_FRACTION = 1e-12


class WindowRangeError(ValueError):
    """Requested readout window lies outside the simulated span."""


@dataclass(frozen=True)
class EchoWindow:
    """Uniform sampling window: [t_start_s, t_end_s] stepped by dt_s."""

    t_start_s: float
    t_end_s: float
    dt_s: float

    def __post_init__(self) -> None:
        if not (
            math.isfinite(self.t_start_s)
            and math.isfinite(self.t_end_s)
            and math.isfinite(self.dt_s)
        ):
            raise InvalidParameterError("window bounds must be finite")
        if self.dt_s <= 0 or self.t_end_s <= self.t_start_s:
            raise InvalidParameterError("window must have dt_s > 0 and t_end_s > t_start_s")

    def times(self) -> np.ndarray:
        n = int(round((self.t_end_s - self.t_start_s) / self.dt_s)) + 1
        return self.t_start_s + self.dt_s * np.arange(n)

    @classmethod
    def centered(cls, center_s: float, halfwidth_s: float, dt_s: float) -> "EchoWindow":
        """Window whose grid contains ``center_s`` exactly."""
        k = max(1, int(round(halfwidth_s / dt_s)))
        return cls(center_s - k * dt_s, center_s + k * dt_s, dt_s)


@dataclass
class EchoTrace:
    """Time-gridded complex ensemble emission."""

    t_s: np.ndarray
    amplitude: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.t_s = np.asarray(self.t_s, dtype=float)
        self.amplitude = np.asarray(self.amplitude, dtype=np.complex128)
        if self.t_s.ndim != 1 or self.t_s.shape != self.amplitude.shape:
            raise InvalidParameterError("t_s and amplitude must be equal-length 1-D arrays")
        if self.t_s.size < 2:
            raise InvalidParameterError("a trace needs at least two samples")
        steps = np.diff(self.t_s)
        if not np.all(steps > 0):
            raise InvalidParameterError("time grid must be strictly increasing")
        if np.max(np.abs(steps - steps[0])) > 1e-9 * steps[0]:
            raise InvalidParameterError("time grid must be uniform")
        if not np.all(np.isfinite(self.amplitude.view(float))):
            raise InvalidParameterError("amplitude must be finite everywhere")

    @property
    def i(self) -> np.ndarray:
        return self.amplitude.real

    @property
    def q(self) -> np.ndarray:
        return self.amplitude.imag

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.amplitude)

    @property
    def dt_s(self) -> float:
        return float(self.t_s[1] - self.t_s[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t_s", "I", "Q"])
            for t, a in zip(self.t_s, self.amplitude):
                writer.writerow([f"{t:.17g}", f"{a.real:.17g}", f"{a.imag:.17g}"])

    @classmethod
    def from_csv(cls, path, metadata: dict | None = None) -> "EchoTrace":
        t, i, q = [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["t_s", "I", "Q"]:
                raise InvalidParameterError(f"unexpected trace header {header!r}")
            for row in reader:
                t.append(float(row[0]))
                i.append(float(row[1]))
                q.append(float(row[2]))
        return cls(np.array(t), np.array(i) + 1j * np.array(q), metadata or {})


def echo_signal(
    ensemble,
    timeline,
    relax: RelaxationParams,
    window: EchoWindow,
    coupling: CouplingModel = CouplingModel(),
    chunk_size: int = 8192,
    threads: int = 1,
    noise_sigma: float = 0.0,
    noise_seed: int = 0,
    description: str = "",
) -> EchoTrace:
    """Coherent ensemble emission over a readout window.

    The window must lie within the timeline's final free-evolution span.
    The cross-pair sum runs over fixed-size chunks combined in index order,
    so the trace is bitwise reproducible for any thread count.
    """
    events = validate_timeline(getattr(timeline, "events", timeline))
    total = timeline_duration(events)
    readout_start = getattr(timeline, "readout_start_s", None)
    if readout_start is None:
        readout_start = 0.0
        t = 0.0
        for ev in events:
            t += ev.duration_s
            if ev.target is not None or ev.control is not None:
                readout_start = t
    times = window.times()
    if times[0] < readout_start - 1e-12 or times[-1] > total + 1e-12:
        raise WindowRangeError(
            f"window [{times[0]:.6e}, {times[-1]:.6e}] outside the final "
            f"free-evolution span [{readout_start:.6e}, {total:.6e}]"
        )

    arrays = ensemble if isinstance(ensemble, PairArrays) else PairArrays.from_pairs(ensemble)
    amp = sample_weighted_coherence(
        arrays,
        events,
        relax,
        times,
        coupling=coupling,
        conjugate=True,
        chunk_size=chunk_size,
        threads=threads,
    )
    if noise_sigma > 0.0:
        rng = np.random.default_rng(noise_seed)
        amp = amp + noise_sigma * (rng.standard_normal(amp.size) + 1j * rng.standard_normal(amp.size))

    meta = {
        "description": description,
        "n_pairs": int(arrays.n),
        "weight_sum": float(arrays.weight.sum()),
        "dt_s": window.dt_s,
    }
    expected = getattr(timeline, "expected_echo_time_s", None)
    if expected is not None:
        meta["expected_echo_time_s"] = float(expected)
    return EchoTrace(times, amp, meta)


@dataclass(frozen=True)
class EchoMetrics:
    """Peak magnitude/time and phase of one trace; ``no_echo`` flags a trace
    whose peak is below the detectability floor (reported, never raised)."""

    peak_magnitude: float
    peak_time_s: float
    phase_deg: float
    no_echo: bool

    def to_dict(self) -> dict:
        return {
            "peak_magnitude": self.peak_magnitude,
            "peak_time_s": self.peak_time_s,
            "phase_deg": self.phase_deg,
            "no_echo": self.no_echo,
        }


def echo_metrics(
    trace: EchoTrace,
    expected_echo_time_s: float,
    search_halfwidth_s: float | None = None,
) -> EchoMetrics:
    """Locate the echo near the expected time and read magnitude and phase.

    ``search_halfwidth_s`` bounds the peak search (3 envelope widths keeps
    free-induction decay out); None searches the whole trace.
    """
    t = trace.t_s
    if not t[0] - 1e-12 <= expected_echo_time_s <= t[-1] + 1e-12:
        raise WindowRangeError(
            f"expected echo time {expected_echo_time_s} outside trace span [{t[0]}, {t[-1]}]"
        )
    if search_halfwidth_s is not None:
        mask = np.abs(t - expected_echo_time_s) <= search_halfwidth_s
        if not mask.any():
            mask = np.abs(t - expected_echo_time_s) <= trace.dt_s
    else:
        mask = np.ones(t.size, dtype=bool)

    mag = trace.magnitude
    candidates = np.where(mask)[0]
    peak = float(mag[candidates].max())
    # among near-ties (flat envelopes), pick the sample closest to the
    # expected time; deterministic and immune to FP noise in the maximum
    ties = candidates[mag[candidates] >= peak * (1.0 - 1e-9)]
    idx = int(ties[np.argmin(np.abs(t[ties] - expected_echo_time_s))])

    weight_sum = trace.metadata.get("weight_sum")
    if weight_sum is not None:
        floor = NO_ECHO_FRACTION * 0.5 * weight_sum
    else:
        floor = NO_ECHO_FRACTION * float(mag.max())
    no_echo = bool(mag[idx] <= floor)
    phase = 0.0 if no_echo else math.degrees(math.atan2(trace.q[idx], trace.i[idx]))
    return EchoMetrics(
        peak_magnitude=float(mag[idx]),
        peak_time_s=float(t[idx]),
        phase_deg=phase,
        no_echo=no_echo,
    )


def wrap_degrees(angle_deg: float) -> float:
    """Wrap an angle difference into (-180, 180]."""
    wrapped = ((angle_deg % 360.0) + 360.0) % 360.0
    if wrapped > 180.0:
        wrapped -= 360.0
    return wrapped


def phase_shift_between(
    trace_a: EchoTrace,
    trace_b: EchoTrace,
    expected_echo_time_s: float,
    search_halfwidth_s: float | None = None,
) -> float | None:
    """Wrapped echo phase difference B - A in degrees, or None if either
    trace reports no echo (the undefined-phase signal)."""
    if not np.array_equal(trace_a.t_s, trace_b.t_s):
        raise InvalidParameterError("traces must share the same time grid")
    ma = echo_metrics(trace_a, expected_echo_time_s, search_halfwidth_s)
    mb = echo_metrics(trace_b, expected_echo_time_s, search_halfwidth_s)
    if ma.no_echo or mb.no_echo:
        return None
    return wrap_degrees(mb.phase_deg - ma.phase_deg)


def gaussian_envelope_fwhm_s(antihole_fwhm_hz: float) -> float:
    """Fourier-pair time FWHM of the echo envelope for a Gaussian line."""
    if antihole_fwhm_hz <= 0:
        raise InvalidParameterError("antihole_fwhm_hz must be > 0")
    return 4.0 * math.log(2.0) / (math.pi * antihole_fwhm_hz)


def envelope_fwhm_from_trace(trace: EchoTrace, peak_time_s: float) -> float:
    """FWHM of |amplitude| around a peak by linear interpolation of the
    half-maximum crossings; raises SequenceError if a crossing is missing."""
    t = trace.t_s
    mag = trace.magnitude
    idx = int(np.argmin(np.abs(t - peak_time_s)))
    half = mag[idx] / 2.0

    left = None
    for k in range(idx, 0, -1):
        if mag[k - 1] <= half <= mag[k]:
            frac = (half - mag[k - 1]) / (mag[k] - mag[k - 1])
            left = t[k - 1] + frac * (t[k] - t[k - 1])
            break
    right = None
    for k in range(idx, t.size - 1):
        if mag[k + 1] <= half <= mag[k]:
            frac = (mag[k] - half) / (mag[k] - mag[k + 1])
            right = t[k] + frac * (t[k + 1] - t[k])
            break
    if left is None or right is None:
        raise SequenceError("envelope does not fall to half maximum inside the trace")
    return float(right - left)
