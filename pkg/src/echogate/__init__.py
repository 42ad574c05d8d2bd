"""Ensemble simulator for photon-echo conditional phase gates between
dipole-coupled, inhomogeneously broadened three-level ions."""

from .quantum_core import (
    DensityMatrix3,
    InvalidParameterError,
    InvalidStateError,
    Pulse,
    RelaxationParams,
    apply_pulse,
    free_evolve,
    pump_cycle,
)
from .ensemble import (
    EnsembleSpec,
    IonPairParams,
    coupling_at_distance,
    sample_ensemble,
    sample_nearest_neighbour_distance,
)
from .protocols import (
    CouplingModel,
    EchoTimeline,
    PerturbSpec,
    SelectionParams,
    SequenceError,
    SequenceEvent,
    distill_rabi,
    make_echo_timeline,
    pair_select,
    run_sequence,
)
from .detection import (
    EchoMetrics,
    EchoTrace,
    EchoWindow,
    WindowRangeError,
    echo_metrics,
    echo_signal,
    phase_shift_between,
)

__version__ = "0.1.0"

__all__ = [
    "DensityMatrix3",
    "Pulse",
    "RelaxationParams",
    "apply_pulse",
    "free_evolve",
    "pump_cycle",
    "EnsembleSpec",
    "IonPairParams",
    "coupling_at_distance",
    "sample_ensemble",
    "sample_nearest_neighbour_distance",
    "CouplingModel",
    "EchoTimeline",
    "PerturbSpec",
    "SelectionParams",
    "SequenceError",
    "SequenceEvent",
    "distill_rabi",
    "make_echo_timeline",
    "pair_select",
    "run_sequence",
    "EchoMetrics",
    "EchoTrace",
    "EchoWindow",
    "WindowRangeError",
    "echo_metrics",
    "echo_signal",
    "phase_shift_between",
    "InvalidParameterError",
    "InvalidStateError",
    "__version__",
]
