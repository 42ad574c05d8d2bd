"""Figure renderers for the simulator's CSV/JSON outputs."""

from .io import InputFormatError, read_demolition_scan, read_summary, read_trace
from .render import FigureJob, plot_conditional_phase, plot_demolition

__version__ = "0.1.0"

__all__ = [
    "FigureJob",
    "InputFormatError",
    "plot_conditional_phase",
    "plot_demolition",
    "read_demolition_scan",
    "read_summary",
    "read_trace",
    "__version__",
]
