"""Configuration-driven experiment runner.

One JSON document describes an experiment (ensemble, relaxation, sequence
timings, preparation steps, scan ranges); the runner wires sampling ->
preparation protocols -> echo detection and emits CSV data plus a JSON
summary per run.  Everything is deterministic for a fixed config: the RNG
is seeded, cross-pair reductions have a fixed order, and thread count never
changes any emitted byte.

Data goes only to files; progress lines go to the log callback (standard
error in the CLI).  Exit-code policy lives in the CLI: 0 success, 2 config
error, 3 validation failure.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import (
    EchoWindow,
    echo_metrics,
    echo_signal,
    gaussian_envelope_fwhm_s,
    phase_shift_between,
    wrap_degrees,
)
from .ensemble import EnsembleSpec, IonPairParams, PairArrays, sample_ensemble
from .protocols import (
    CouplingModel,
    PerturbSpec,
    SelectionParams,
    distill_rabi,
    make_echo_timeline,
    pair_select,
    run_sequence,
    selection_effective_time,
)
from .quantum_core import Pulse, RelaxationParams

EXPERIMENTS = ("demolition_scan", "conditional_phase", "selectivity_scan", "validate")


class ConfigError(ValueError):
    """Configuration parsing/validation failure with a field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"config field '{path}': {message}")


def _expect_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected an object, got {type(value).__name__}")
    return value


_MISSING = object()


class _Section:
    """Strict reader over one config object: typed gets, unknown-key check.

    A key that is absent takes the default; an explicit JSON null is only
    legal where ``allow_none`` is set and then means None (e.g. an infinite
    lifetime or an auto-derived quantity).
    """

    def __init__(self, data: dict, path: str):
        self.data = data
        self.path = path
        self.seen: set[str] = set()

    def _fetch(self, key, required):
        self.seen.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.path}.{key}", "missing required field")
            return _MISSING
        return self.data[key]

    def number(self, key, required=False, default=None, minimum=None, maximum=None,
               allow_none=False):
        value = self._fetch(key, required)
        if value is _MISSING:
            return default
        if value is None:
            if allow_none:
                return None
            raise ConfigError(f"{self.path}.{key}", "null is not allowed here")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{self.path}.{key}", f"expected a number, got {value!r}")
        value = float(value)
        if minimum is not None and value < minimum:
            raise ConfigError(f"{self.path}.{key}", f"must be >= {minimum}, got {value}")
        if maximum is not None and value > maximum:
            raise ConfigError(f"{self.path}.{key}", f"must be <= {maximum}, got {value}")
        return value

    def integer(self, key, required=False, default=None, minimum=None):
        value = self._fetch(key, required)
        if value is _MISSING:
            return default
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{self.path}.{key}", f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{self.path}.{key}", f"must be >= {minimum}, got {value}")
        return int(value)

    def boolean(self, key, default=False):
        value = self._fetch(key, False)
        if value is _MISSING:
            return default
        if not isinstance(value, bool):
            raise ConfigError(f"{self.path}.{key}", f"expected true/false, got {value!r}")
        return value

    def string(self, key, required=False, default=None, choices=None):
        value = self._fetch(key, required)
        if value is _MISSING:
            return default
        if not isinstance(value, str):
            raise ConfigError(f"{self.path}.{key}", f"expected a string, got {value!r}")
        if choices and value not in choices:
            raise ConfigError(f"{self.path}.{key}", f"must be one of {choices}, got {value!r}")
        return value

    def section(self, key) -> dict:
        self.seen.add(key)
        return _expect_mapping(self.data.get(key, {}), f"{self.path}.{key}")

    def reject_unknown(self) -> None:
        unknown = set(self.data) - self.seen
        if unknown:
            raise ConfigError(
                f"{self.path}.{sorted(unknown)[0]}", "unknown field (typo?)"
            )


@dataclass(frozen=True)
class SequenceConfig:
    tau_s: float = 20e-6
    target_rabi_hz: float = 8e6
    control_rabi_hz: float = 8e6
    window_halfwidth_s: float = 15e-6
    window_dt_s: float = 0.25e-6
    observation_margin_s: float | None = None


@dataclass(frozen=True)
class DistillConfig:
    enabled: bool = True
    n_cycles: int = 10
    rabi_hz: float | None = None  # None: use the channel drive rate
    pump_branch: float = 1.0


@dataclass(frozen=True)
class SelectionConfig:
    enabled: bool = True
    n_cycles: int = 10
    target_coupling_hz: float | None = None  # None: calibrated from design_phase_deg
    design_phase_deg: float = 20.0
    final_rabi_hz: float | None = None  # None: 4x the target drive rate
    compensate_final_pulse: bool = True
    alternate_roles: bool = False
    pump_branch: float = 1.0


@dataclass(frozen=True)
class PerturbConfig:
    enabled: bool = True
    placement: str = "with_rephasing"
    area_cycles: float = 0.5
    rabi_hz: float | None = None  # None: sequence.control_rabi_hz


@dataclass(frozen=True)
class ScanConfig:
    # demolition: control pulse duration grid
    t_c_min_s: float = 0.0
    t_c_max_s: float | None = None  # None: two Rabi periods of the control drive
    n_points: int = 41
    # selectivity: coupling offset grid around the design value
    coupling_halfwidth_hz: float | None = None  # None: 1/(2 tau), one acceptance period


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    ensemble: EnsembleSpec
    relaxation: RelaxationParams = field(default_factory=RelaxationParams)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    coupling_model: CouplingModel = field(default_factory=CouplingModel)
    scan: ScanConfig = field(default_factory=ScanConfig)
    output_dir: str = "out"
    emit_trajectories: bool = False

    # -- parsing ------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        root = _Section(_expect_mapping(data, "$"), "$")
        experiment = root.string("experiment", required=True, choices=EXPERIMENTS)

        ens = _Section(root.section("ensemble"), "$.ensemble")
        if experiment != "validate" and "n_pairs" not in ens.data:
            raise ConfigError("$.ensemble.n_pairs", "missing required field")
        ensemble = EnsembleSpec(
            n_pairs=ens.integer("n_pairs", default=1, minimum=1),
            antihole_fwhm_hz=ens.number("antihole_fwhm_hz", default=100e3, minimum=0.0),
            rabi_scale_sigma=ens.number("rabi_scale_sigma", default=0.1, minimum=0.0),
            kappa_hz_nm3=ens.number("kappa_hz_nm3", default=1.25e9),
            dopant_density_per_nm3=ens.number("dopant_density_per_nm3", default=1e-5),
            coupling_sign=ens.string("coupling_sign", default="random",
                                     choices=("random", "positive")),
            rng_seed=ens.integer("rng_seed", default=0, minimum=0),
            fixed_coupling_hz=ens.number("fixed_coupling_hz", default=None, allow_none=True),
        )
        ens.reject_unknown()

        rel = _Section(root.section("relaxation"), "$.relaxation")
        t1 = rel.number("T1_s", default=2e-3, allow_none=True)
        t2 = rel.number("T2_s", default=1.0 / (math.pi * 100.0), allow_none=True)
        relaxation = RelaxationParams(
            T1_s=math.inf if t1 is None else t1,
            T2_s=math.inf if t2 is None else t2,
            branch_aux=rel.number("branch_aux", default=0.5, minimum=0.0, maximum=1.0),
        )
        rel.reject_unknown()

        seq = _Section(root.section("sequence"), "$.sequence")
        sequence = SequenceConfig(
            tau_s=seq.number("tau_s", default=20e-6, minimum=0.0),
            target_rabi_hz=seq.number("target_rabi_hz", default=8e6, minimum=1.0),
            control_rabi_hz=seq.number("control_rabi_hz", default=8e6, minimum=1.0),
            window_halfwidth_s=seq.number("window_halfwidth_s", default=15e-6, minimum=0.0),
            window_dt_s=seq.number("window_dt_s", default=0.25e-6, minimum=1e-12),
            observation_margin_s=seq.number("observation_margin_s", default=None, allow_none=True),
        )
        seq.reject_unknown()

        dis = _Section(root.section("distill"), "$.distill")
        distill = DistillConfig(
            enabled=dis.boolean("enabled", default=True),
            n_cycles=dis.integer("n_cycles", default=10, minimum=1),
            rabi_hz=dis.number("rabi_hz", default=None, allow_none=True),
            pump_branch=dis.number("pump_branch", default=1.0, minimum=0.0, maximum=1.0),
        )
        dis.reject_unknown()

        sel = _Section(root.section("selection"), "$.selection")
        selection = SelectionConfig(
            enabled=sel.boolean("enabled", default=True),
            n_cycles=sel.integer("n_cycles", default=10, minimum=1),
            target_coupling_hz=sel.number("target_coupling_hz", default=None, allow_none=True),
            design_phase_deg=sel.number("design_phase_deg", default=20.0),
            final_rabi_hz=sel.number("final_rabi_hz", default=None, allow_none=True),
            compensate_final_pulse=sel.boolean("compensate_final_pulse", default=True),
            alternate_roles=sel.boolean("alternate_roles", default=False),
            pump_branch=sel.number("pump_branch", default=1.0, minimum=0.0, maximum=1.0),
        )
        sel.reject_unknown()

        per = _Section(root.section("perturb"), "$.perturb")
        perturb = PerturbConfig(
            enabled=per.boolean("enabled", default=True),
            placement=per.string("placement", default="with_rephasing",
                                 choices=("with_rephasing", "after_first_pulse", "both_halves")),
            area_cycles=per.number("area_cycles", default=0.5, minimum=0.0),
            rabi_hz=per.number("rabi_hz", default=None, allow_none=True),
        )
        per.reject_unknown()

        cpl = _Section(root.section("coupling_model"), "$.coupling_model")
        coupling_model = CouplingModel(
            backaction=cpl.boolean("backaction", default=True),
            frozen_control_during_target_pulses=cpl.boolean(
                "frozen_control_during_target_pulses", default=False
            ),
        )
        cpl.reject_unknown()

        scn = _Section(root.section("scan"), "$.scan")
        scan = ScanConfig(
            t_c_min_s=scn.number("t_c_min_s", default=0.0, minimum=0.0),
            t_c_max_s=scn.number("t_c_max_s", default=None, allow_none=True),
            n_points=scn.integer("n_points", default=41, minimum=2),
            coupling_halfwidth_hz=scn.number("coupling_halfwidth_hz", default=None,
                                             allow_none=True),
        )
        scn.reject_unknown()

        cfg = cls(
            experiment=experiment,
            ensemble=ensemble,
            relaxation=relaxation,
            sequence=sequence,
            distill=distill,
            selection=selection,
            perturb=perturb,
            coupling_model=coupling_model,
            scan=scan,
            output_dir=root.string("output_dir", default="out"),
            emit_trajectories=root.boolean("emit_trajectories", default=False),
        )
        root.reject_unknown()
        return cfg

    def to_dict(self) -> dict:
        def t_or_null(x):
            return None if math.isinf(x) else x

        return {
            "experiment": self.experiment,
            "ensemble": {
                "n_pairs": self.ensemble.n_pairs,
                "antihole_fwhm_hz": self.ensemble.antihole_fwhm_hz,
                "rabi_scale_sigma": self.ensemble.rabi_scale_sigma,
                "kappa_hz_nm3": self.ensemble.kappa_hz_nm3,
                "dopant_density_per_nm3": self.ensemble.dopant_density_per_nm3,
                "coupling_sign": self.ensemble.coupling_sign,
                "rng_seed": self.ensemble.rng_seed,
                "fixed_coupling_hz": self.ensemble.fixed_coupling_hz,
            },
            "relaxation": {
                "T1_s": t_or_null(self.relaxation.T1_s),
                "T2_s": t_or_null(self.relaxation.T2_s),
                "branch_aux": self.relaxation.branch_aux,
            },
            "sequence": {
                "tau_s": self.sequence.tau_s,
                "target_rabi_hz": self.sequence.target_rabi_hz,
                "control_rabi_hz": self.sequence.control_rabi_hz,
                "window_halfwidth_s": self.sequence.window_halfwidth_s,
                "window_dt_s": self.sequence.window_dt_s,
                "observation_margin_s": self.sequence.observation_margin_s,
            },
            "distill": {
                "enabled": self.distill.enabled,
                "n_cycles": self.distill.n_cycles,
                "rabi_hz": self.distill.rabi_hz,
                "pump_branch": self.distill.pump_branch,
            },
            "selection": {
                "enabled": self.selection.enabled,
                "n_cycles": self.selection.n_cycles,
                "target_coupling_hz": self.selection.target_coupling_hz,
                "design_phase_deg": self.selection.design_phase_deg,
                "final_rabi_hz": self.selection.final_rabi_hz,
                "compensate_final_pulse": self.selection.compensate_final_pulse,
                "alternate_roles": self.selection.alternate_roles,
                "pump_branch": self.selection.pump_branch,
            },
            "perturb": {
                "enabled": self.perturb.enabled,
                "placement": self.perturb.placement,
                "area_cycles": self.perturb.area_cycles,
                "rabi_hz": self.perturb.rabi_hz,
            },
            "coupling_model": {
                "backaction": self.coupling_model.backaction,
                "frozen_control_during_target_pulses":
                    self.coupling_model.frozen_control_during_target_pulses,
            },
            "scan": {
                "t_c_min_s": self.scan.t_c_min_s,
                "t_c_max_s": self.scan.t_c_max_s,
                "n_points": self.scan.n_points,
                "coupling_halfwidth_hz": self.scan.coupling_halfwidth_hz,
            },
            "output_dir": self.output_dir,
            "emit_trajectories": self.emit_trajectories,
        }

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        except OSError as exc:
            raise ConfigError("$", f"cannot read {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None
                       ) -> "ExperimentConfig":
        from dataclasses import replace

        cfg = self
        if seed is not None:
            cfg = replace(cfg, ensemble=replace(cfg.ensemble, rng_seed=seed))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=output_dir)
        return cfg

    # -- derived quantities ---------------------------------------------------

    def selection_params(self) -> SelectionParams:
        """Selection parameters with the design coupling calibrated so the
        conditional phase 2 pi Delta* t_pert equals design_phase_deg."""
        final_rabi = self.selection.final_rabi_hz
        if final_rabi is None:
            final_rabi = 4.0 * self.sequence.target_rabi_hz
        base = SelectionParams(
            tau_s=self.sequence.tau_s,
            target_coupling_hz=0.0,
            n_cycles=self.selection.n_cycles,
            target_rabi_hz=self.sequence.target_rabi_hz,
            control_rabi_hz=self.sequence.control_rabi_hz,
            final_rabi_hz=final_rabi,
            compensate_final_pulse=self.selection.compensate_final_pulse,
            alternate_roles=self.selection.alternate_roles,
        )
        dstar = self.selection.target_coupling_hz
        if dstar is None:
            t_pert = selection_effective_time(base, self.coupling_model)
            dstar = (self.selection.design_phase_deg / 360.0) / t_pert
        from dataclasses import replace

        return replace(base, target_coupling_hz=dstar)

    def perturb_spec(self, duration_s: float | None = None) -> PerturbSpec | None:
        if not self.perturb.enabled:
            return None
        rabi = self.perturb.rabi_hz or self.sequence.control_rabi_hz
        if duration_s is None:
            pulse = Pulse.from_area(self.perturb.area_cycles, rabi)
        else:
            pulse = Pulse(rabi, duration_s)
        return PerturbSpec(pulse, self.perturb.placement)


# ---------------------------------------------------------------------------
# Output helpers.
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _silent(_msg: str) -> None:
    pass


# ---------------------------------------------------------------------------
# Preparation shared by the experiments.
# ---------------------------------------------------------------------------


def _prepare(cfg: ExperimentConfig, threads: int, log) -> list[IonPairParams]:
    pairs = sample_ensemble(cfg.ensemble)
    log(f"sampled {len(pairs)} pairs (seed {cfg.ensemble.rng_seed})")
    if cfg.distill.enabled:
        rabi = cfg.distill.rabi_hz or cfg.sequence.target_rabi_hz
        pulse = Pulse.from_area(1.0, rabi)
        for channel in ("target", "control"):
            pairs = distill_rabi(
                pairs, channel, cfg.distill.n_cycles, pulse, cfg.relaxation,
                pump_branch=cfg.distill.pump_branch, threads=threads,
            )
        w = sum(p.weight for p in pairs) / len(pairs)
        log(f"distilled both channels x{cfg.distill.n_cycles}: mean weight {w:.4f}")
    return pairs


def _echo_window(cfg: ExperimentConfig, expected_echo_time_s: float) -> EchoWindow:
    return EchoWindow.centered(
        expected_echo_time_s, cfg.sequence.window_halfwidth_s, cfg.sequence.window_dt_s
    )


def _search_halfwidth(cfg: ExperimentConfig) -> float | None:
    if cfg.ensemble.antihole_fwhm_hz <= 0:
        return None
    return 3.0 * gaussian_envelope_fwhm_s(cfg.ensemble.antihole_fwhm_hz)


# ---------------------------------------------------------------------------
# Experiments.
# ---------------------------------------------------------------------------


def run_demolition_scan(cfg: ExperimentConfig, threads: int = 1, log=_silent) -> dict:
    """Echo magnitude vs perturbing-pulse duration on a distilled ensemble.

    Emits ``demolition_scan.csv`` (t_c_s, echo_magnitude,
    echo_magnitude_control_off) and ``summary.json``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _prepare(cfg, threads, log)
    arrays = PairArrays.from_pairs(pairs)

    rabi_c = cfg.perturb.rabi_hz or cfg.sequence.control_rabi_hz
    period = 1.0 / rabi_c
    t_max = cfg.scan.t_c_max_s if cfg.scan.t_c_max_s is not None else 2.0 * period
    if t_max - cfg.scan.t_c_min_s < 2.0 * period - 1e-15:
        raise ConfigError(
            "$.scan.t_c_max_s",
            f"scan must cover at least two Rabi periods ({2 * period:.3e} s)",
        )
    durations = np.linspace(cfg.scan.t_c_min_s, t_max, cfg.scan.n_points)

    tl0 = make_echo_timeline(
        cfg.sequence.tau_s,
        target_rabi_hz=cfg.sequence.target_rabi_hz,
        observation_margin_s=cfg.sequence.observation_margin_s,
    )
    window = _echo_window(cfg, tl0.expected_echo_time_s)
    halfwidth = _search_halfwidth(cfg)

    baseline_trace = echo_signal(
        arrays, tl0, cfg.relaxation, window,
        coupling=cfg.coupling_model, threads=threads,
        description="demolition baseline, control off",
    )
    baseline = echo_metrics(baseline_trace, tl0.expected_echo_time_s, halfwidth)
    log(f"baseline magnitude {baseline.peak_magnitude:.6g} at {baseline.peak_time_s * 1e6:.2f} us")

    def run_point(t_c: float) -> float:
        if t_c == 0.0:
            return baseline.peak_magnitude
        tl = make_echo_timeline(
            cfg.sequence.tau_s,
            target_rabi_hz=cfg.sequence.target_rabi_hz,
            perturb=PerturbSpec(Pulse(rabi_c, t_c), cfg.perturb.placement),
            observation_margin_s=cfg.sequence.observation_margin_s,
        )
        trace = echo_signal(
            arrays, tl, cfg.relaxation, window, coupling=cfg.coupling_model, threads=1,
        )
        return echo_metrics(trace, tl.expected_echo_time_s, halfwidth).peak_magnitude

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            magnitudes = list(pool.map(run_point, durations))
    else:
        magnitudes = [run_point(float(t_c)) for t_c in durations]
    log(f"scanned {durations.size} control pulse durations")

    _write_csv(
        out / "demolition_scan.csv",
        ["t_c_s", "echo_magnitude", "echo_magnitude_control_off"],
        [(float(t), float(m), baseline.peak_magnitude) for t, m in zip(durations, magnitudes)],
    )

    ratios = np.array(magnitudes) / baseline.peak_magnitude
    full_period_idx = [int(np.argmin(np.abs(durations - k * period))) for k in (1, 2)
                       if durations[-1] >= k * period - 1e-15]
    summary = {
        "experiment": "demolition_scan",
        "n_pairs": cfg.ensemble.n_pairs,
        "seed": cfg.ensemble.rng_seed,
        "tau_s": cfg.sequence.tau_s,
        "control_rabi_hz": rabi_c,
        "rabi_period_s": period,
        "baseline_magnitude": baseline.peak_magnitude,
        "min_ratio": float(ratios.min()),
        "max_ratio": float(ratios.max()),
        "full_period_ratios": [float(ratios[i]) for i in full_period_idx],
        "no_echo_baseline": baseline.no_echo,
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_conditional_phase(cfg: ExperimentConfig, threads: int = 1, log=_silent) -> dict:
    """Distill -> pair-select -> echo with and without the control excited.

    Emits ``trace_control_off.csv``, ``trace_control_on.csv`` and
    ``summary.json`` with the phase shift and magnitude ratio.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _prepare(cfg, threads, log)

    select = cfg.selection_params()
    t_pert = selection_effective_time(select, cfg.coupling_model)
    if cfg.selection.enabled:
        t0 = time.perf_counter()
        pairs = pair_select(
            pairs, select, cfg.relaxation, coupling=cfg.coupling_model,
            pump_branch=cfg.selection.pump_branch, threads=threads,
        )
        w = sum(p.weight for p in pairs) / len(pairs)
        log(f"selected x{select.n_cycles} at design coupling "
            f"{select.target_coupling_hz:.1f} Hz: mean weight {w:.4f} "
            f"({time.perf_counter() - t0:.1f} s)")

    arrays = PairArrays.from_pairs(pairs)
    tl_off = make_echo_timeline(
        cfg.sequence.tau_s,
        target_rabi_hz=cfg.sequence.target_rabi_hz,
        observation_margin_s=cfg.sequence.observation_margin_s,
    )
    tl_on = make_echo_timeline(
        cfg.sequence.tau_s,
        target_rabi_hz=cfg.sequence.target_rabi_hz,
        perturb=cfg.perturb_spec(),
        observation_margin_s=cfg.sequence.observation_margin_s,
    )
    window = _echo_window(cfg, tl_off.expected_echo_time_s)
    halfwidth = _search_halfwidth(cfg)

    trace_off = echo_signal(
        arrays, tl_off, cfg.relaxation, window, coupling=cfg.coupling_model,
        threads=threads, description="conditional phase, control off",
    )
    trace_on = echo_signal(
        arrays, tl_on, cfg.relaxation, window, coupling=cfg.coupling_model,
        threads=threads, description="conditional phase, control on",
    )
    trace_off.to_csv(out / "trace_control_off.csv")
    trace_on.to_csv(out / "trace_control_on.csv")

    m_off = echo_metrics(trace_off, tl_off.expected_echo_time_s, halfwidth)
    m_on = echo_metrics(trace_on, tl_on.expected_echo_time_s, halfwidth)
    shift = phase_shift_between(trace_off, trace_on, tl_off.expected_echo_time_s, halfwidth)
    ratio = (m_on.peak_magnitude / m_off.peak_magnitude) if m_off.peak_magnitude > 0 else None
    expected = wrap_degrees(360.0 * select.target_coupling_hz * t_pert) if cfg.perturb.enabled else 0.0
    log(f"phase shift {shift if shift is None else round(shift, 3)} deg "
        f"(expected {expected:.3f}), magnitude ratio {ratio and round(ratio, 4)}")

    if cfg.emit_trajectories:
        _emit_trajectories(cfg, pairs, tl_on, out)

    summary = {
        "experiment": "conditional_phase",
        "n_pairs": cfg.ensemble.n_pairs,
        "seed": cfg.ensemble.rng_seed,
        "tau_s": cfg.sequence.tau_s,
        "delta_star_hz": select.target_coupling_hz,
        "t_pert_s": t_pert,
        "expected_phase_deg": expected,
        "phase_shift_deg": shift,
        "magnitude_ratio": ratio,
        "selection_enabled": cfg.selection.enabled,
        "surviving_weight_fraction": float(arrays.weight.sum() / max(1, arrays.n)),
        "metrics_control_off": m_off.to_dict(),
        "metrics_control_on": m_on.to_dict(),
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_selectivity_scan(cfg: ExperimentConfig, threads: int = 1, log=_silent) -> dict:
    """Post-selection weight vs coupling on a grid of ideal pairs.

    The grid spans one acceptance period around the design coupling by
    default; the analytic column is cos^2(pi (D - D*) t_eff) ** n_cycles.
    Emits ``selectivity_scan.csv`` and ``summary.json``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    select = cfg.selection_params()
    t_eff = selection_effective_time(select, cfg.coupling_model)
    halfwidth = cfg.scan.coupling_halfwidth_hz
    if halfwidth is None:
        halfwidth = 0.5 / t_eff
    offsets = np.linspace(-halfwidth, halfwidth, cfg.scan.n_points)
    couplings = select.target_coupling_hz + offsets

    grid_pairs = [IonPairParams(0.0, 0.0, 1.0, 1.0, float(d), 1.0) for d in couplings]
    log(f"selectivity scan over {couplings.size} couplings, {select.n_cycles} cycles")
    selected = pair_select(
        grid_pairs, select, cfg.relaxation, coupling=cfg.coupling_model,
        pump_branch=cfg.selection.pump_branch, threads=threads,
    )
    weights = np.array([p.weight for p in selected])
    analytic = np.cos(math.pi * offsets * t_eff) ** (2 * select.n_cycles)

    _write_csv(
        out / "selectivity_scan.csv",
        ["coupling_hz", "weight", "weight_analytic"],
        [(float(c), float(w), float(a)) for c, w, a in zip(couplings, weights, analytic)],
    )

    rms = float(np.sqrt(np.mean((weights - analytic) ** 2)))
    mean = float(np.sum(weights * couplings) / np.sum(weights))
    spread = float(np.sqrt(np.sum(weights * (couplings - mean) ** 2) / np.sum(weights)))
    summary = {
        "experiment": "selectivity_scan",
        "seed": cfg.ensemble.rng_seed,
        "tau_s": cfg.sequence.tau_s,
        "t_eff_s": t_eff,
        "delta_star_hz": select.target_coupling_hz,
        "n_cycles": select.n_cycles,
        "rms_error": rms,
        "weighted_spread_hz": spread,
        "spread_limit_hz": 1.0 / (4.0 * cfg.sequence.tau_s),
        "surviving_weight_fraction": float(weights.mean()),
    }
    _write_json(out / "summary.json", summary)
    log(f"acceptance RMS error {rms:.5f}; weighted spread {spread / 1e3:.2f} kHz")
    return summary


def _emit_trajectories(cfg, pairs, timeline, out: Path, n_emit: int = 4) -> None:
    for i, pair in enumerate(pairs[:n_emit]):
        traj = run_sequence(pair, timeline, cfg.relaxation, cfg.sequence.window_dt_s,
                            coupling=cfg.coupling_model)
        rows = []
        for t, tgt, ctl in zip(traj.times_s, traj.target_states, traj.control_states):
            p_t, p_c = tgt.populations, ctl.populations
            ge = tgt.coherence_ge
            rows.append((float(t), float(p_t[0]), float(p_t[1]), float(p_t[2]),
                         float(ge.real), float(ge.imag),
                         float(p_c[0]), float(p_c[1]), float(p_c[2])))
        _write_csv(
            out / f"trajectory_pair{i}.csv",
            ["t_s", "tgt_p_g", "tgt_p_e", "tgt_p_a", "tgt_ge_re", "tgt_ge_im",
             "ctl_p_g", "ctl_p_e", "ctl_p_a"],
            rows,
        )


def run_experiment(cfg: ExperimentConfig, threads: int = 1, log=_silent) -> tuple[dict, int]:
    """Dispatch on cfg.experiment; returns (summary, exit_code)."""
    if cfg.experiment == "demolition_scan":
        return run_demolition_scan(cfg, threads, log), 0
    if cfg.experiment == "conditional_phase":
        return run_conditional_phase(cfg, threads, log), 0
    if cfg.experiment == "selectivity_scan":
        return run_selectivity_scan(cfg, threads, log), 0
    if cfg.experiment == "validate":
        return run_validation(cfg, log)
    raise ConfigError("$.experiment", f"unknown experiment {cfg.experiment!r}")


# ---------------------------------------------------------------------------
# Validation suite (fixed seeds, library-level invariants).
# ---------------------------------------------------------------------------


def _rk4_unitaries(rabi, det, phi, dur, max_step_s=1e-9):
    """Fine-step RK4 integrator used as the propagator oracle."""
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
    u = np.broadcast_to(np.eye(2, dtype=complex), (rabi.size, 2, 2)).copy()
    minus_ih = -1j * h
    for _ in range(steps):
        k1 = minus_ih @ u
        k2 = minus_ih @ (u + 0.5 * dt * k1)
        k3 = minus_ih @ (u + 0.5 * dt * k2)
        k4 = minus_ih @ (u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def validation_checks() -> list[tuple[str, bool, str]]:
    """Run the library invariant suite; returns (name, passed, detail) rows."""
    checks: list[tuple[str, bool, str]] = []

    def record(name, passed, detail):
        checks.append((name, bool(passed), detail))

    from .quantum_core import (
        DensityMatrix3,
        apply_pulse,
        drive_propagators,
        free_evolve,
        pump_cycle,
    )

    # 1. propagator oracle
    rng = np.random.default_rng(2026)
    n = 1000
    omega = rng.uniform(0.0, 1e6, n)
    delta = rng.uniform(-1e6, 1e6, n)
    phi = rng.uniform(-math.pi, math.pi, n)
    dur = rng.uniform(0.0, 10e-6, n)
    amps = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    amps /= np.linalg.norm(amps, axis=1, keepdims=True)
    rho0 = amps[:, :, None] * amps.conj()[:, None, :]
    u_ref = _rk4_unitaries(omega, delta, phi, dur)
    worst = 0.0
    for k in range(n):
        u_c = drive_propagators(omega[k], delta[k], phi[k], float(dur[k]))[0, :2, :2]
        diff = np.abs(
            u_ref[k] @ rho0[k] @ u_ref[k].conj().T - u_c @ rho0[k] @ u_c.conj().T
        ).max()
        worst = max(worst, float(diff))
    record("propagator_oracle_1000", worst <= 1e-8, f"max error {worst:.3e} (limit 1e-8)")

    # 2. composition and unitarity
    worst_comp = 0.0
    worst_unit = 0.0
    for _ in range(200):
        om = rng.uniform(0, 1e6)
        de = rng.uniform(-1e6, 1e6)
        ph = rng.uniform(-math.pi, math.pi)
        t1, t2 = rng.uniform(0, 5e-6, 2)
        state = DensityMatrix3.pure(rng.standard_normal(3) + 1j * rng.standard_normal(3))
        a = apply_pulse(apply_pulse(state, Pulse(om, t1, ph), de, 1.0), Pulse(om, t2, ph), de, 1.0)
        b = apply_pulse(state, Pulse(om, t1 + t2, ph), de, 1.0)
        worst_comp = max(worst_comp, float(np.abs(a.rho - b.rho).max()))
        ev_before = np.linalg.eigvalsh(state.rho)
        ev_after = np.linalg.eigvalsh(b.rho)
        worst_unit = max(worst_unit, float(np.abs(ev_before - ev_after).max()))
    record("pulse_composition", worst_comp <= 1e-10, f"max deviation {worst_comp:.3e}")
    record("pulse_unitarity", worst_unit <= 1e-10, f"max eigenvalue drift {worst_unit:.3e}")

    # 3. pump idempotence and free-evolution unitarity
    state = DensityMatrix3.pure([1.0, 0.8 + 0.2j, 0.4])
    once = pump_cycle(state, 0.7)
    twice = pump_cycle(once, 0.7)
    d = float(np.abs(twice.rho - once.rho).max())
    record("pump_idempotent", d <= 1e-14, f"repeat deviation {d:.2e}")
    ev = free_evolve(DensityMatrix3.pure([1.0, 1.0j, 0.0]), 9e-6, 41e3, RelaxationParams.lossless())
    d = abs(abs(ev.coherence_ge) - 0.5)
    record("free_evolution_lossless_unitary", d <= 1e-12, f"|rho_ge| drift {d:.2e}")

    # 4. ensemble determinism and statistics
    spec = EnsembleSpec(n_pairs=20_000, rng_seed=99)
    a = sample_ensemble(spec)
    b = sample_ensemble(spec)
    record("ensemble_deterministic", a == b, "same seed, bitwise-identical pairs")
    arrays = PairArrays.from_pairs(a)
    sd = float(arrays.target_detuning_hz.std())
    expected_sd = spec.antihole_fwhm_hz / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    rel = abs(sd / expected_sd - 1.0)
    record("antihole_width", rel <= 0.02, f"detuning sd off by {rel * 100:.2f}% (limit 2%)")

    # 5. nearest-neighbour law (KS on 1e6 draws)
    rate = (4.0 / 3.0) * math.pi * 1e-5
    u = 1.0 - np.random.default_rng(7).random(1_000_000)
    draws = np.sort((-np.log(u) / rate) ** (1.0 / 3.0))
    cdf = 1.0 - np.exp(-rate * draws**3)
    m = draws.size
    ks = max(np.max(np.arange(1, m + 1) / m - cdf), np.max(cdf - np.arange(0, m) / m))
    record("nearest_neighbour_ks", ks < 0.002, f"KS statistic {ks:.5f} (limit 0.002)")

    # 6. zero-coupling transparency
    from .protocols import PerturbSpec as _PS

    tl_active = make_echo_timeline(15e-6, perturb=_PS(Pulse.from_area(0.5, 2e6), "with_rephasing"))
    tl_silent = make_echo_timeline(15e-6)
    p0 = IonPairParams(12e3, -7e3, 1.0, 1.0, 0.0)
    sa = run_sequence(p0, tl_active, RelaxationParams.lossless(), 5e-6)
    sb = run_sequence(p0, tl_silent, RelaxationParams.lossless(), 5e-6)
    d = float(np.abs(sa.target_states[-1].rho - sb.target_states[-1].rho).max())
    record("zero_coupling_transparency", d <= 1e-12, f"state deviation {d:.2e}")

    # 7. symmetric-shift cancellation
    from .protocols import delay as _delay

    pert = _PS(Pulse.from_area(0.5, 1e6), "both_halves")
    tl_on = make_echo_timeline(20e-6, perturb=pert)
    tl_off = make_echo_timeline(20e-6)
    first, gap, reph, obs = tl_off.events
    off_events = [_delay(pert.pulse.duration_s), first, gap, reph, obs]
    win = EchoWindow.centered(tl_on.expected_echo_time_s, 8e-6, 0.25e-6)
    k = int(np.argmin(np.abs(win.times() - tl_on.expected_echo_time_s)))
    on_tr = echo_signal([IonPairParams(0, 0, 1, 1, 100.0)], tl_on, RelaxationParams.lossless(), win)
    off_tr = echo_signal([IonPairParams(0, 0, 1, 1, 0.0)], off_events, RelaxationParams.lossless(), win)
    resid = abs(float(np.angle(on_tr.amplitude[k] / off_tr.amplitude[k])))
    record("symmetric_shift_cancellation", resid < 1e-9, f"residual {resid:.2e} rad (limit 1e-9)")

    # 8. selection monotonicity
    sel_pairs = [IonPairParams(0, 0, 1, 1, 2778.0 + x) for x in (0.0, 5e3, 15e3, 24e3)]
    prev = np.ones(len(sel_pairs))
    mono = True
    for cycles in (1, 2, 4):
        sel = SelectionParams(tau_s=20e-6, target_coupling_hz=2778.0, n_cycles=cycles)
        out = pair_select(sel_pairs, sel, RelaxationParams.lossless())
        w = np.array([p.weight for p in out])
        mono = mono and bool(np.all(w <= prev + 1e-12))
        prev = w
    record("selection_monotonic", mono, "weights non-increasing in n_cycles")

    # 9. detection linearity
    tl = make_echo_timeline(15e-6)
    ea = sample_ensemble(EnsembleSpec(n_pairs=200, rng_seed=41))
    eb = sample_ensemble(EnsembleSpec(n_pairs=200, rng_seed=42))
    win = EchoWindow.centered(tl.expected_echo_time_s, 6e-6, 0.5e-6)
    ta = echo_signal(ea, tl, RelaxationParams(), win)
    tb = echo_signal(eb, tl, RelaxationParams(), win)
    tab = echo_signal(ea + eb, tl, RelaxationParams(), win)
    scale = float(np.abs(tab.amplitude).max())
    d = float(np.abs(tab.amplitude - ta.amplitude - tb.amplitude).max()) / scale
    record("detection_linearity", d <= 1e-12, f"relative deviation {d:.2e}")

    return checks


def run_validation(cfg: ExperimentConfig, log=_silent) -> tuple[dict, int]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    checks = validation_checks()
    for name, passed, detail in checks:
        log(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    n_failed = sum(1 for _, passed, _ in checks if not passed)
    summary = {
        "experiment": "validate",
        "seed": cfg.ensemble.rng_seed,
        "n_checks": len(checks),
        "n_failed": n_failed,
        "checks": [
            {"name": name, "passed": passed, "detail": detail}
            for name, passed, detail in checks
        ],
    }
    _write_json(out / "summary.json", summary)
    return summary, 0 if n_failed == 0 else 3
