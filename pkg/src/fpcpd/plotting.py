"""Figures for benchmark and pipeline reports, written to files (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .shm import HEALTHY  # noqa: E402

__all__ = ["plot_traces", "plot_decisions", "plot_localization", "render_pipeline_figures"]

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_traces(traces: dict, path, target: float | None = None, x: str = "seconds") -> Path:
    """RMSE against wall-clock seconds (or epochs) for each solver, log scale.

    ``traces`` maps a solver name to its list of trace records.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, trace in traces.items():
        if not trace:
            continue
        xs = [getattr(r, x) for r in trace]
        ax.plot(xs, [r.rmse for r in trace], label=name, lw=1.5)
    if target is not None:
        ax.axhline(target, color="0.5", ls="--", lw=1, label=f"target {target:g}")
    ax.set_yscale("log")
    ax.set_xlabel("training time (s)" if x == "seconds" else x)
    ax.set_ylabel("RMSE")
    ax.legend(frameon=False)
    return _save(fig, path)


def _label_order(labels):
    rest = sorted(set(labels) - {HEALTHY})
    return ([HEALTHY] if HEALTHY in labels else []) + rest


def plot_decisions(report, path) -> Path:
    """Decision values of test events, grouped by label, with the zero threshold."""
    events = report.events
    labels = _label_order([e["label"] for e in events])
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap("tab10")
    x0 = 0
    for n, lab in enumerate(labels):
        vals = [e["decision"] for e in events if e["label"] == lab]
        ax.scatter(np.arange(x0, x0 + len(vals)), vals, s=8, color=cmap(n % 10), label=lab)
        x0 += len(vals)
    ax.axhline(0.0, color="k", lw=1)
    ax.set_xlabel("test event (all trials)")
    ax.set_ylabel("decision value")
    ax.legend(frameon=False, markerscale=2)
    return _save(fig, path)


def plot_localization(report, path) -> Path:
    """Mean localization score per sensor for each label."""
    loc = report.localization
    labels = _label_order([r["label"] for r in loc])
    M = np.array([np.mean([r["scores"] for r in loc if r["label"] == lab], axis=0) for lab in labels])
    fig, ax = plt.subplots(figsize=(7, 1.2 + 0.5 * len(labels)))
    im = ax.imshow(M, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xticks(range(M.shape[1]))
    ax.set_xlabel("sensor")
    fig.colorbar(im, ax=ax, label="mean k-NN score")
    return _save(fig, path)


def render_pipeline_figures(report, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    return {
        "decisions_png": plot_decisions(report, outdir / "decisions.png"),
        "localization_png": plot_localization(report, outdir / "localization.png"),
    }
