"""Figure builders: pure functions of the input files, deterministic output.

No physics is computed here; annotations come from the run summaries. Both
renderers emit PNG and SVG side by side; matplotlib's hash salt and metadata
are pinned so identical inputs give identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import read_demolition_scan, read_summary, read_trace  # noqa: E402

_STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "echogate-figures",
}


@dataclass(frozen=True)
class FigureJob:
    """One rendering task: input files, output basename, layout choice."""

    inputs: dict = field(default_factory=dict)  # role -> path
    summary: str | None = None
    output: str = "figure"
    layout: str = "side_by_side"  # conditional-phase panels


def _save(fig, output: str) -> list[Path]:
    base = Path(output)
    base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    # the rc context must cover saving too: svg.hashsalt is read at save time
    with plt.rc_context(_STYLE):
        for ext in ("png", "svg"):
            path = base.with_suffix(f".{ext}")
            fig.savefig(path, metadata=_scrubbed_metadata(ext))
            written.append(path)
    plt.close(fig)
    return written


def _scrubbed_metadata(ext: str) -> dict:
    if ext == "png":
        return {"Software": "echogate-figures"}
    return {"Date": None}  # SVG embeds a timestamp unless suppressed


def build_demolition_figure(job: FigureJob):
    """Echo magnitude vs control pulse duration with the control-off baseline."""
    scan = read_demolition_scan(job.inputs["scan"])
    summary = read_summary(job.summary) if job.summary else None

    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.2, 3.4))
        t_us = scan["t_c_s"] * 1e6
        ax.plot(
            t_us, scan["echo_magnitude_control_off"],
            "o-", color="0.55", markersize=3.5, linewidth=0.8,
            label="echo_magnitude_control_off",
        )
        ax.plot(
            t_us, scan["echo_magnitude"],
            "x", color="tab:red", markersize=5.5,
            label="echo_magnitude",
        )
        ax.set_xlabel("control pulse duration (µs)")
        ax.set_ylabel("echo magnitude (arb.)")
        ax.set_ylim(bottom=0.0)
        title = "Control-ion nutation on the target echo"
        if summary is not None:
            title += (
                f"\nmin ratio {summary['min_ratio']:.2f}, "
                f"Rabi period {summary['rabi_period_s'] * 1e6:.3f} µs"
            )
        ax.set_title(title)
        ax.legend(loc="center right", fontsize=8)
        fig.tight_layout()
    return fig


def build_conditional_figure(job: FigureJob):
    """Two panels of I/Q echo traces: control off (left) vs on (right)."""
    off = read_trace(job.inputs["off"])
    on = read_trace(job.inputs["on"])
    summary = read_summary(job.summary) if job.summary else None

    with plt.rc_context(_STYLE):
        if job.layout == "stacked":
            fig, axes = plt.subplots(2, 1, figsize=(5.2, 5.6), sharex=True, sharey=True)
        else:
            fig, axes = plt.subplots(1, 2, figsize=(7.6, 3.2), sharex=True, sharey=True)
        for ax, trace, label in zip(axes, (off, on), ("control off", "control on")):
            t_us = trace["t_s"] * 1e6
            ax.plot(t_us, trace["I"], color="tab:blue", linewidth=1.0, label="I")
            ax.plot(t_us, trace["Q"], color="tab:orange", linewidth=1.0, label="Q")
            ax.set_title(label, fontsize=9)
            ax.set_xlabel("time (µs)")
        axes[0].set_ylabel("echo signal (arb.)")
        axes[0].legend(loc="upper left", fontsize=8)
        if summary is not None and summary.get("phase_shift_deg") is not None:
            fig.suptitle(
                f"conditional phase shift {summary['phase_shift_deg']:.1f}°, "
                f"magnitude ratio {summary['magnitude_ratio']:.3f}",
                fontsize=10,
            )
            fig.tight_layout(rect=(0, 0, 1, 0.93))
        else:
            fig.tight_layout()
    return fig


def plot_demolition(job: FigureJob) -> list[Path]:
    """Render the demolition-scan figure; returns the written paths."""
    return _save(build_demolition_figure(job), job.output)


def plot_conditional_phase(job: FigureJob) -> list[Path]:
    """Render the two-panel I/Q figure; returns the written paths."""
    return _save(build_conditional_figure(job), job.output)
