"""Multi-channel pulse sequences on dipole-coupled ion pairs.

A timeline is an ordered list of :class:`SequenceEvent`; each event advances
both channels by its duration, carrying an optional drive pulse per channel.
Concurrent pulses occupy the same event (same start, same duration); builders
slice longer pulses into back-to-back segments, which is exact because equal
drive parameters compose.

Coupling model: the target's instantaneous detuning is its static detuning
plus coupling * P_e(control), and symmetrically for the control when
back-action is enabled.  Delays and single-channel pulse events use exact
closed-form integrals of the partner's excited population (Rabi quadratures
under drive, exponential decay when idle); only events driving both channels
at once are propagated in short interleaved sub-steps with the shift
re-evaluated from the state at each sub-step.

The protocols implemented on top of the engine:

* ``distill_rabi``     -- repeated nominal 2*pi pulses plus pump resets that
  keep only ions responding at the designed Rabi rate;
* ``make_echo_timeline`` -- two-pulse echo sequences with an optional
  perturbing control pulse in several placements;
* ``pair_select``      -- the conditional-echo selection cycle that returns
  targets with the designed coupling to ground and shelves the rest.

Weights are multiplied by the post-pump ground survival each preparation
cycle, and states are re-conditioned on the surviving (ground) population,
so a pair's weight is the fraction of its original population still active.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ensemble import IonPairParams, PairArrays
from .quantum_core import (
    A,
    E,
    G,
    DensityMatrix3,
    InvalidParameterError,
    Pulse,
    RelaxationParams,
    TWO_PI,
    conjugate_states,
    drive_propagators,
    excited_population_integral_decay,
    excited_population_integral_driven,
    ground_batch,
    pump_batch,
    _require_finite,
)

# Interleaved sub-step ceiling for events that drive both channels at once;
# short events are always resolved by at least MIN_SUBSTEPS steps.
SUBSTEP_MAX_S = 100e-9
MIN_SUBSTEPS = 8

# A resonant square pi/2 pulse releases its coherence as if dephasing had
# already run for 1/(2 pi Omega), not the half-duration 1/(8 Omega) of the
# centre-to-centre rule; the echo time and the selection sampling point
# carry this first-order origin correction (times 1/Omega).
SQUARE_PULSE_ORIGIN = 1.0 / (2.0 * math.pi) - 0.125

CHANNELS = ("target", "control")


class SequenceError(ValueError):
    """A timeline or protocol parameter set is malformed."""


@dataclass(frozen=True)
class SequenceEvent:
    """One slot of the shared two-channel timeline.

    ``target``/``control`` hold the drive pulse active on that channel for
    the whole event, or None for an idle channel; both None is a plain
    delay.  Pulse durations must equal the event duration exactly.
    """

    duration_s: float
    target: Pulse | None = None
    control: Pulse | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.duration_s) or self.duration_s < 0:
            raise SequenceError(f"event duration must be finite and >= 0, got {self.duration_s}")
        for name, pulse in (("target", self.target), ("control", self.control)):
            if pulse is not None and pulse.duration_s != self.duration_s:
                raise SequenceError(
                    f"{name} pulse duration {pulse.duration_s} != event duration "
                    f"{self.duration_s}; concurrent pulses must overlap exactly"
                )


def delay(duration_s: float) -> SequenceEvent:
    return SequenceEvent(duration_s)


def target_pulse(pulse: Pulse) -> SequenceEvent:
    return SequenceEvent(pulse.duration_s, target=pulse)


def control_pulse(pulse: Pulse) -> SequenceEvent:
    return SequenceEvent(pulse.duration_s, control=pulse)


def simultaneous(target: Pulse, control: Pulse) -> SequenceEvent:
    if target.duration_s != control.duration_s:
        raise SequenceError(
            "simultaneous pulses must have equal durations; slice the longer one"
        )
    return SequenceEvent(target.duration_s, target=target, control=control)


def validate_timeline(events) -> tuple[SequenceEvent, ...]:
    events = tuple(events)
    for ev in events:
        if not isinstance(ev, SequenceEvent):
            raise SequenceError(f"timeline entries must be SequenceEvent, got {type(ev)!r}")
    return events


def timeline_from_config(entries: list[dict]) -> tuple[SequenceEvent, ...]:
    """Build a timeline from the configuration-file event list.

    Each entry is ``{"kind": "delay", "duration_s": ...}`` or
    ``{"kind": "pulse", "channel": "target"|"control", "rabi_hz": ...,
    "duration_s": ... | "area_cycles": ..., "phase_rad": 0,
    "extra_detuning_hz": 0, "simultaneous": false}``.  A control pulse with
    ``simultaneous`` true starts together with the immediately preceding
    target pulse (the two must have equal durations).  The inverse is
    :func:`timeline_to_config`.
    """
    events: list[SequenceEvent] = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise SequenceError(f"timeline entry {k}: expected an object")
        kind = entry.get("kind")
        if kind == "delay":
            if "duration_s" not in entry:
                raise SequenceError(f"timeline entry {k}: delay needs duration_s")
            events.append(delay(float(entry["duration_s"])))
            continue
        if kind != "pulse":
            raise SequenceError(f"timeline entry {k}: kind must be 'delay' or 'pulse'")
        channel = entry.get("channel")
        if channel not in ("target", "control"):
            raise SequenceError(f"timeline entry {k}: channel must be target or control")
        if "rabi_hz" not in entry:
            raise SequenceError(f"timeline entry {k}: pulse needs rabi_hz")
        rabi = float(entry["rabi_hz"])
        if "duration_s" in entry:
            duration = float(entry["duration_s"])
        elif "area_cycles" in entry:
            if rabi <= 0:
                raise SequenceError(f"timeline entry {k}: area needs rabi_hz > 0")
            duration = float(entry["area_cycles"]) / rabi
        else:
            raise SequenceError(f"timeline entry {k}: pulse needs duration_s or area_cycles")
        pulse = Pulse(
            rabi,
            duration,
            float(entry.get("phase_rad", 0.0)),
            float(entry.get("extra_detuning_hz", 0.0)),
        )
        if entry.get("simultaneous", False):
            if channel != "control" or not events or events[-1].target is None \
                    or events[-1].control is not None:
                raise SequenceError(
                    f"timeline entry {k}: 'simultaneous' is only valid on a control "
                    "pulse directly after a target pulse"
                )
            events[-1] = simultaneous(events[-1].target, pulse)
        elif channel == "target":
            events.append(target_pulse(pulse))
        else:
            events.append(control_pulse(pulse))
    return tuple(events)


def timeline_to_config(events) -> list[dict]:
    """Serialize a timeline into the configuration-file event list."""

    def pulse_entry(channel: str, pulse: Pulse, simultaneous: bool = False) -> dict:
        entry = {
            "kind": "pulse", "channel": channel, "rabi_hz": pulse.rabi_hz,
            "duration_s": pulse.duration_s, "phase_rad": pulse.phase_rad,
            "extra_detuning_hz": pulse.extra_detuning_hz,
        }
        if simultaneous:
            entry["simultaneous"] = True
        return entry

    out: list[dict] = []
    for ev in validate_timeline(events):
        if ev.target is None and ev.control is None:
            out.append({"kind": "delay", "duration_s": ev.duration_s})
        elif ev.target is not None and ev.control is not None:
            out.append(pulse_entry("target", ev.target))
            out.append(pulse_entry("control", ev.control, simultaneous=True))
        elif ev.target is not None:
            out.append(pulse_entry("target", ev.target))
        else:
            out.append(pulse_entry("control", ev.control))
    return out


def timeline_duration(events) -> float:
    return float(sum(ev.duration_s for ev in events))


@dataclass(frozen=True)
class CouplingModel:
    """How the dipole shift enters the propagation.

    ``backaction``: the target's excitation also shifts the control (on by
    default).  ``frozen_control_during_target_pulses``: hold the control
    population at its event-start value while the target is pulsed, for
    analytic tests.
    """

    backaction: bool = True
    frozen_control_during_target_pulses: bool = False


@dataclass
class PairTrajectory:
    """Diagnostic record of one pair propagated through a timeline."""

    times_s: np.ndarray
    target_states: list[DensityMatrix3]
    control_states: list[DensityMatrix3]

    @property
    def target_coherence_ge(self) -> np.ndarray:
        return np.array([s.rho[G, E] for s in self.target_states])


class PairPropagator:
    """Co-propagates the target and control of every pair on a shared clock.

    Holds ``(n, 3, 3)`` state arrays for both channels; ``run`` walks a
    timeline, cutting events at requested sample times (exact, by pulse
    composition) and invoking ``on_sample`` at each.
    """

    def __init__(self, pairs: PairArrays, relax: RelaxationParams, coupling: CouplingModel):
        self.pairs = pairs
        self.relax = relax
        self.coupling = coupling
        n = pairs.n
        self.tgt = ground_batch(n)
        self.ctl = ground_batch(n)

    # -- relaxation helpers -------------------------------------------------

    def _decay_factors(self, dur: float) -> tuple[float, float]:
        r = self.relax
        t1f = 1.0 if math.isinf(r.T1_s) else math.exp(-dur / r.T1_s)
        t2f = 1.0 if math.isinf(r.T2_s) else math.exp(-dur / r.T2_s)
        return t1f, t2f

    def _free(self, rho: np.ndarray, phase_cycles: np.ndarray, dur: float) -> np.ndarray:
        t1f, t2f = self._decay_factors(dur)
        from .quantum_core import evolve_free_batch

        return evolve_free_batch(rho, phase_cycles, t1f, t2f, self.relax.branch_aux)

    # -- segment propagation ------------------------------------------------

    def _segment_both_free(self, dur: float) -> None:
        p = self.pairs
        int_pe_c = excited_population_integral_decay(self.ctl, self.relax.T1_s, dur)
        int_pe_t = excited_population_integral_decay(self.tgt, self.relax.T1_s, dur)
        tgt_phase = p.target_detuning_hz * dur + p.coupling_hz * int_pe_c
        ctl_phase = p.control_detuning_hz * dur
        if self.coupling.backaction:
            ctl_phase = ctl_phase + p.coupling_hz * int_pe_t
        self.tgt = self._free(self.tgt, tgt_phase, dur)
        self.ctl = self._free(self.ctl, ctl_phase, dur)

    def _segment_target_pulse(self, dur: float, pulse: Pulse, frozen_pe_c) -> None:
        p = self.pairs
        if frozen_pe_c is not None:
            pe_c_for_shift = frozen_pe_c
        else:
            pe_c_for_shift = excited_population_integral_decay(self.ctl, self.relax.T1_s, dur) / dur
        delta_t = p.target_detuning_hz + p.coupling_hz * pe_c_for_shift - pulse.extra_detuning_hz
        omega_t = pulse.rabi_hz * p.target_rabi_scale

        ctl_phase = p.control_detuning_hz * dur
        if self.coupling.backaction:
            int_pe_t = excited_population_integral_driven(
                self.tgt, omega_t, delta_t, pulse.phase_rad, dur
            )
            ctl_phase = ctl_phase + p.coupling_hz * int_pe_t

        u = drive_propagators(omega_t, delta_t, pulse.phase_rad, dur)
        self.tgt = conjugate_states(u, self.tgt)
        self.ctl = self._free(self.ctl, ctl_phase, dur)

    def _segment_control_pulse(self, dur: float, pulse: Pulse) -> None:
        p = self.pairs
        delta_c = p.control_detuning_hz - pulse.extra_detuning_hz
        if self.coupling.backaction:
            pe_t_avg = excited_population_integral_decay(self.tgt, self.relax.T1_s, dur) / dur
            delta_c = delta_c + p.coupling_hz * pe_t_avg
        omega_c = pulse.rabi_hz * p.control_rabi_scale

        int_pe_c = excited_population_integral_driven(
            self.ctl, omega_c, delta_c, pulse.phase_rad, dur
        )
        tgt_phase = p.target_detuning_hz * dur + p.coupling_hz * int_pe_c

        u = drive_propagators(omega_c, delta_c, pulse.phase_rad, dur)
        self.ctl = conjugate_states(u, self.ctl)
        self.tgt = self._free(self.tgt, tgt_phase, dur)

    def _segment_simultaneous(
        self, dur: float, tp: Pulse, cp: Pulse, frozen_pe_c
    ) -> None:
        p = self.pairs
        n_sub = max(MIN_SUBSTEPS, math.ceil(dur / SUBSTEP_MAX_S))
        dt = dur / n_sub
        omega_t = tp.rabi_hz * p.target_rabi_scale
        omega_c = cp.rabi_hz * p.control_rabi_scale
        for _ in range(n_sub):
            pe_t = self.tgt[:, E, E].real
            pe_c_pre = self.ctl[:, E, E].real
            delta_c = p.control_detuning_hz - cp.extra_detuning_hz
            if self.coupling.backaction:
                delta_c = delta_c + p.coupling_hz * pe_t
            u_c = drive_propagators(omega_c, delta_c, cp.phase_rad, dt)
            self.ctl = conjugate_states(u_c, self.ctl)
            if frozen_pe_c is not None:
                pe_c = frozen_pe_c
            else:
                # trapezoidal estimate over this sub-step
                pe_c = 0.5 * (pe_c_pre + self.ctl[:, E, E].real)
            delta_t = p.target_detuning_hz + p.coupling_hz * pe_c - tp.extra_detuning_hz
            u_t = drive_propagators(omega_t, delta_t, tp.phase_rad, dt)
            self.tgt = conjugate_states(u_t, self.tgt)

    def _advance(self, ev: SequenceEvent, a: float, b: float, frozen_pe_c) -> None:
        dur = b - a
        if dur <= 0.0:
            return
        if ev.target is None and ev.control is None:
            self._segment_both_free(dur)
        elif ev.target is not None and ev.control is not None:
            self._segment_simultaneous(dur, ev.target, ev.control, frozen_pe_c)
        elif ev.target is not None:
            self._segment_target_pulse(dur, ev.target, frozen_pe_c)
        else:
            self._segment_control_pulse(dur, ev.control)

    # -- timeline walk ------------------------------------------------------

    def run(self, events, sample_times=None, on_sample=None) -> None:
        """Propagate through ``events``, firing ``on_sample(k)`` at each time.

        ``sample_times`` must be sorted ascending and lie within the
        timeline; sampling cuts are exact (equal-parameter pulse segments
        compose).
        """
        events = validate_timeline(events)
        samples = np.asarray(sample_times if sample_times is not None else [], dtype=float)
        total = timeline_duration(events)
        if samples.size and (samples[0] < -1e-15 or samples[-1] > total + 1e-12):
            raise SequenceError(
                f"sample times [{samples[0]}, {samples[-1]}] outside timeline span {total}"
            )

        si = 0
        t0 = 0.0
        while si < samples.size and samples[si] <= 1e-18:
            on_sample(si)
            si += 1
        for ev in events:
            t1 = t0 + ev.duration_s
            frozen_pe_c = None
            if (
                self.coupling.frozen_control_during_target_pulses
                and ev.target is not None
            ):
                frozen_pe_c = self.ctl[:, E, E].real.copy()
            offset = 0.0
            while si < samples.size and samples[si] <= t1 + 1e-15:
                cut = min(max(samples[si] - t0, 0.0), ev.duration_s)
                self._advance(ev, offset, cut, frozen_pe_c)
                offset = cut
                on_sample(si)
                si += 1
            self._advance(ev, offset, ev.duration_s, frozen_pe_c)
            t0 = t1


def _chunk_ranges(n: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]


def _map_chunks(ranges, fn, threads: int) -> list:
    if threads <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def run_sequence(
    pair: IonPairParams,
    timeline,
    relax: RelaxationParams,
    sample_grid_s: float,
    coupling: CouplingModel = CouplingModel(),
) -> PairTrajectory:
    """Propagate one pair through a timeline, recording on a uniform grid."""
    events = validate_timeline(getattr(timeline, "events", timeline))
    if not math.isfinite(sample_grid_s) or sample_grid_s <= 0:
        raise InvalidParameterError(f"sample_grid_s must be > 0, got {sample_grid_s}")
    total = timeline_duration(events)
    n_samples = int(math.floor(total / sample_grid_s + 1e-9)) + 1
    times = np.minimum(sample_grid_s * np.arange(n_samples), total)
    if times[-1] < total - 1e-15:
        times = np.append(times, total)

    arrays = PairArrays.from_pairs([pair])
    prop = PairPropagator(arrays, relax, coupling)
    rec_t: list[float] = []
    rec_tgt: list[DensityMatrix3] = []
    rec_ctl: list[DensityMatrix3] = []

    def record(k: int) -> None:
        rec_t.append(float(times[k]))
        rec_tgt.append(DensityMatrix3(prop.tgt[0]))
        rec_ctl.append(DensityMatrix3(prop.ctl[0]))

    prop.run(events, times, record)
    return PairTrajectory(np.array(rec_t), rec_tgt, rec_ctl)


def sample_weighted_coherence(
    pairs,
    timeline,
    relax: RelaxationParams,
    sample_times,
    coupling: CouplingModel = CouplingModel(),
    conjugate: bool = True,
    chunk_size: int = 8192,
    threads: int = 1,
) -> np.ndarray:
    """Weighted sum of the target ge coherence at each sample time.

    Returns the complex array sum_i w_i * conj(rho_ge,i(t_k)) (or without the
    conjugation).  Pairs are processed in fixed-size chunks and chunk partial
    sums are combined in index order, so the result is bitwise identical for
    any thread count.
    """
    arrays = pairs if isinstance(pairs, PairArrays) else PairArrays.from_pairs(pairs)
    events = validate_timeline(getattr(timeline, "events", timeline))
    times = np.asarray(sample_times, dtype=float)

    def run_chunk(a: int, b: int) -> np.ndarray:
        chunk = arrays.slice(a, b)
        prop = PairPropagator(chunk, relax, coupling)
        partial = np.zeros(times.size, dtype=np.complex128)

        def collect(k: int) -> None:
            ge = prop.tgt[:, G, E]
            if conjugate:
                ge = np.conj(ge)
            partial[k] = np.sum(chunk.weight * ge)

        prop.run(events, times, collect)
        return partial

    parts = _map_chunks(_chunk_ranges(arrays.n, chunk_size), run_chunk, threads)
    total = np.zeros(times.size, dtype=np.complex128)
    for part in parts:
        total += part
    return total


# ---------------------------------------------------------------------------
# Rabi-rate distillation.
# ---------------------------------------------------------------------------


def distill_rabi(
    ensemble: list[IonPairParams],
    channel: str,
    n_cycles: int,
    pulse: Pulse,
    relax: RelaxationParams,
    pump_branch: float = 1.0,
    chunk_size: int = 65536,
    threads: int = 1,
) -> list[IonPairParams]:
    """Nominal-2*pi pulse + pump cycles on one channel; weights multiply by
    the post-pump ground survival each cycle.

    Ions at the designed Rabi rate complete full cycles and keep weight 1;
    off-rate or detuned ions are left partially excited and shelved.
    ``pump_branch`` is the shelving fraction of the pump step (1.0 models the
    repeated optical pumping that eventually parks all non-returned
    population); spontaneous-decay branching stays in ``relax``.
    """
    if channel not in CHANNELS:
        raise SequenceError(f"channel must be one of {CHANNELS}, got {channel!r}")
    if n_cycles < 1:
        raise SequenceError(f"n_cycles must be >= 1, got {n_cycles}")
    arrays = PairArrays.from_pairs(ensemble)
    if channel == "target":
        det, scale = arrays.target_detuning_hz, arrays.target_rabi_scale
    else:
        det, scale = arrays.control_detuning_hz, arrays.control_rabi_scale

    def run_chunk(a: int, b: int) -> np.ndarray:
        survival = np.ones(b - a)
        delta = det[a:b] - pulse.extra_detuning_hz
        omega = pulse.rabi_hz * scale[a:b]
        u = drive_propagators(omega, delta, pulse.phase_rad, pulse.duration_s)
        for _ in range(n_cycles):
            state = conjugate_states(u, ground_batch(b - a))
            state = pump_batch(state, pump_branch)
            survival *= state[:, G, G].real
        return survival

    parts = _map_chunks(_chunk_ranges(arrays.n, chunk_size), run_chunk, threads)
    survival = np.concatenate(parts) if parts else np.ones(0)
    new_w = np.clip(arrays.weight * survival, 0.0, 1.0)
    return [p.with_weight(float(w)) for p, w in zip(ensemble, new_w)]


# ---------------------------------------------------------------------------
# Echo timelines.
# ---------------------------------------------------------------------------

PERTURB_PLACEMENTS = ("with_rephasing", "after_first_pulse", "both_halves")


@dataclass(frozen=True)
class PerturbSpec:
    """Perturbing control pulse and where it sits in the echo sequence.

    ``with_rephasing`` starts it together with the rephasing pulse (shift
    active in the second half only); ``after_first_pulse`` fires it right
    after the initial pulse and leaves the control excited (shift active in
    both halves, the cancelled configuration); ``both_halves`` excites the
    control before the sequence starts so a constant shift spans everything.
    """

    pulse: Pulse
    placement: str = "with_rephasing"

    def __post_init__(self) -> None:
        if self.placement not in PERTURB_PLACEMENTS:
            raise SequenceError(
                f"placement must be one of {PERTURB_PLACEMENTS}, got {self.placement!r}"
            )


@dataclass(frozen=True)
class EchoTimeline:
    """Echo sequence events plus the derived reference times.

    ``tau_s`` is the centre-to-centre delay between the initial and
    rephasing pulses; the echo is expected at ``expected_echo_time_s`` =
    first-pulse centre + 2 tau.
    """

    events: tuple[SequenceEvent, ...]
    tau_s: float
    t_first_center_s: float
    t_rephasing_center_s: float
    expected_echo_time_s: float
    readout_start_s: float
    total_duration_s: float


def make_echo_timeline(
    tau_s: float,
    target_rabi_hz: float = 1e6,
    perturb: PerturbSpec | None = None,
    observation_margin_s: float | None = None,
) -> EchoTimeline:
    """Two-pulse echo: pi/2 -- tau -- pi -- observation window.

    ``tau_s`` is centre-to-centre, so the rephased emission peaks at
    2*tau after the first pulse centre (finite-pulse corrections are tens of
    nanoseconds at the default Rabi rate).  The observation delay extends to
    the expected echo time plus ``observation_margin_s`` (default
    max(tau, 20 us)).
    """
    _require_finite(tau_s=tau_s, target_rabi_hz=target_rabi_hz)
    if target_rabi_hz <= 0:
        raise SequenceError(f"target_rabi_hz must be > 0, got {target_rabi_hz}")
    t_half = 0.25 / target_rabi_hz
    t_pi = 0.5 / target_rabi_hz
    budget = t_half + t_pi
    if perturb is not None and perturb.placement == "after_first_pulse":
        budget += perturb.pulse.duration_s
    if tau_s <= budget:
        raise SequenceError(
            f"tau_s={tau_s} too small for pulse durations totalling {budget}"
        )

    first = Pulse.from_area(0.25, target_rabi_hz)
    reph = Pulse.from_area(0.5, target_rabi_hz)
    gap1 = tau_s - t_half / 2.0 - t_pi / 2.0

    events: list[SequenceEvent] = []
    t_first_center = t_half / 2.0
    if perturb is not None and perturb.placement == "both_halves":
        events.append(control_pulse(perturb.pulse))
        t_first_center += perturb.pulse.duration_s
    events.append(target_pulse(first))
    if perturb is not None and perturb.placement == "after_first_pulse":
        events.append(control_pulse(perturb.pulse))
        events.append(delay(gap1 - perturb.pulse.duration_s))
    else:
        events.append(delay(gap1))

    if perturb is not None and perturb.placement == "with_rephasing":
        events.extend(_overlap_block(reph, perturb.pulse))
    else:
        events.append(target_pulse(reph))

    t_reph_center = t_first_center + t_half / 2.0 + gap1 + t_pi / 2.0
    expected_echo = t_first_center + 2.0 * tau_s + SQUARE_PULSE_ORIGIN / target_rabi_hz
    readout_start = timeline_duration(events)
    margin = observation_margin_s if observation_margin_s is not None else max(tau_s, 2e-5)
    obs = expected_echo + margin - readout_start
    if obs <= 0:
        raise SequenceError("observation window collapsed; increase tau_s or margin")
    events.append(delay(obs))

    return EchoTimeline(
        events=tuple(events),
        tau_s=tau_s,
        t_first_center_s=t_first_center,
        t_rephasing_center_s=t_reph_center,
        expected_echo_time_s=expected_echo,
        readout_start_s=readout_start,
        total_duration_s=timeline_duration(events),
    )


def _overlap_block(tp: Pulse, cp: Pulse) -> list[SequenceEvent]:
    """Start-aligned pulses on both channels, sliced to exact-overlap events."""
    if cp.duration_s == 0.0:
        return [target_pulse(tp)]
    if tp.duration_s == cp.duration_s:
        return [simultaneous(tp, cp)]
    if cp.duration_s < tp.duration_s:
        head, tail = tp.split(cp.duration_s)
        return [simultaneous(head, cp), target_pulse(tail)]
    head, tail = cp.split(tp.duration_s)
    return [simultaneous(tp, head), control_pulse(tail)]


# ---------------------------------------------------------------------------
# Interaction-based pair selection.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionParams:
    """Parameters of the conditional-echo selection cycle.

    ``target_coupling_hz`` is the design coupling Delta*: a target whose
    accrued conditional phase matches 2*pi * Delta* * t_eff returns to
    ground and keeps its weight.  The final pi/2 carrier is
    offset by Delta* when ``compensate_final_pulse`` is set (the designed
    shift is known, so the pulse can track it).  ``alternate_roles`` swaps
    the echo and perturbing roles on every other cycle.
    """

    tau_s: float
    target_coupling_hz: float
    n_cycles: int = 10
    target_rabi_hz: float = 1e6
    control_rabi_hz: float = 1e6
    final_rabi_hz: float | None = None  # None: target_rabi_hz
    compensate_final_pulse: bool = True
    alternate_roles: bool = False

    def __post_init__(self) -> None:
        _require_finite(
            tau_s=self.tau_s,
            target_coupling_hz=self.target_coupling_hz,
            target_rabi_hz=self.target_rabi_hz,
            control_rabi_hz=self.control_rabi_hz,
        )
        if self.tau_s <= 0 or self.n_cycles < 1:
            raise SequenceError("tau_s must be > 0 and n_cycles >= 1")
        if self.target_rabi_hz <= 0 or self.control_rabi_hz <= 0:
            raise SequenceError("Rabi rates must be > 0")
        if self.final_rabi_hz is not None and self.final_rabi_hz <= 0:
            raise SequenceError("final_rabi_hz must be > 0")


def selection_effective_time(select: SelectionParams, coupling: CouplingModel) -> float:
    """Conditional-phase accrual time of one selection cycle.

    With live coupling the control's excitation ramp contributes half its
    pulse, the rest of the rephasing block contributes fully and the second
    gap runs to the echo-symmetric point (centre-to-centre tau plus the
    square-pulse origin correction): t_eff = tau + (t_pi - t_c)/2 + origin.
    With the frozen-control flag only the second gap counts.
    """
    t_pi = 0.5 / select.target_rabi_hz
    t_c = 0.5 / select.control_rabi_hz
    origin = SQUARE_PULSE_ORIGIN / select.target_rabi_hz
    if coupling.frozen_control_during_target_pulses:
        return select.tau_s + t_pi / 2.0 - max(t_pi, t_c) + origin
    return select.tau_s + (t_pi - t_c) / 2.0 + origin


def selection_cycle_events(
    select: SelectionParams, coupling: CouplingModel
) -> tuple[SequenceEvent, ...]:
    """One selection cycle: pi/2 -- tau -- (pi || control pi) -- tau -- pi/2.

    The final pi/2 starts at the echo-symmetric point and its phase is
    2*pi * Delta* * t_eff, so a pair with the design coupling returns to
    ground exactly; the closing control pi returns the control to ground
    before the pump step.
    """
    t_half = 0.25 / select.target_rabi_hz
    t_pi = 0.5 / select.target_rabi_hz
    t_c = 0.5 / select.control_rabi_hz
    tau = select.tau_s
    gap1 = tau - t_half / 2.0 - t_pi / 2.0
    if gap1 <= 0:
        raise SequenceError(f"tau_s={tau} too small for the selection pulse durations")

    first = Pulse.from_area(0.25, select.target_rabi_hz)
    reph = Pulse.from_area(0.5, select.target_rabi_hz)
    ctl_pi = Pulse.from_area(0.5, select.control_rabi_hz)

    events: list[SequenceEvent] = [target_pulse(first), delay(gap1)]
    events.extend(_overlap_block(reph, ctl_pi))

    block_end = t_half + gap1 + max(t_pi, t_c)
    t_expected = t_half / 2.0 + 2.0 * tau + SQUARE_PULSE_ORIGIN / select.target_rabi_hz
    gap2 = t_expected - block_end
    if gap2 <= 0:
        raise SequenceError("selection rephasing block extends past the echo point")
    events.append(delay(gap2))

    t_eff = selection_effective_time(select, coupling)
    phase = (TWO_PI * select.target_coupling_hz * t_eff) % TWO_PI
    extra = select.target_coupling_hz if select.compensate_final_pulse else 0.0
    # the projecting pulse may be stronger than the block drive so its
    # bandwidth covers every surviving coupling class
    final_rabi = select.final_rabi_hz or select.target_rabi_hz
    final = Pulse.from_area(0.25, final_rabi, phase_rad=phase, extra_detuning_hz=extra)
    events.append(target_pulse(final))
    events.append(control_pulse(ctl_pi))
    return tuple(events)


def pair_select(
    ensemble: list[IonPairParams],
    select: SelectionParams,
    relax: RelaxationParams,
    coupling: CouplingModel = CouplingModel(),
    pump_branch: float = 1.0,
    chunk_size: int = 8192,
    threads: int = 1,
) -> list[IonPairParams]:
    """Shelve targets whose coupling deviates from the design value.

    Each cycle runs the conditional echo, pumps, multiplies the weight by
    the target's post-pump ground survival, and re-conditions both ions on
    the ground state.  For ideal pulses the per-cycle acceptance is
    cos^2(pi (Delta - Delta*) t_eff).
    """
    events = selection_cycle_events(select, coupling)
    arrays = PairArrays.from_pairs(ensemble)

    def run_chunk(a: int, b: int) -> np.ndarray:
        chunk = arrays.slice(a, b)
        survival = np.ones(b - a)
        for cycle in range(select.n_cycles):
            swap = select.alternate_roles and cycle % 2 == 1
            prop = PairPropagator(
                chunk.swapped_roles() if swap else chunk, relax, coupling
            )
            prop.run(events)
            pumped = pump_batch(prop.tgt, pump_branch)
            survival *= pumped[:, G, G].real
        return survival

    parts = _map_chunks(_chunk_ranges(arrays.n, chunk_size), run_chunk, threads)
    survival = np.concatenate(parts) if parts else np.ones(0)
    new_w = np.clip(arrays.weight * survival, 0.0, 1.0)
    return [p.with_weight(float(w)) for p, w in zip(ensemble, new_w)]
