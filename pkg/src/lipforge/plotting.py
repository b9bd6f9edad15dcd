"""Matplotlib figures rendered from report tables."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .report import Report, Table  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.25,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale: float = 1.0, ratio: float | None = None):
    width = 5.0 * scale
    ratio = ratio or (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def _groups(table: Table, *keys):
    out = defaultdict(list)
    for rec in table.records():
        out[tuple(rec.get(k, "") for k in keys)].append(rec)
    return out


def _plot_sweep(table: Table, ax):
    for (model, kind), recs in sorted(_groups(table, "model", "kind").items()):
        eps = [float(r["epsilon"]) * 255 for r in recs]
        acc = [float(r["robust_accuracy"]) for r in recs]
        label = f"{model} {kind}".strip()
        ax.plot(eps, acc, marker="o", label=label)
    ax.set_xscale("symlog", linthresh=1.0)
    ax.set_xlabel(r"$\epsilon$ (x 1/255)")
    ax.set_ylabel("robust accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()


def _plot_curve(table: Table, ax):
    for (model,), recs in sorted(_groups(table, "model").items()):
        ax.step([float(r["radius"]) for r in recs], [float(r["certified_accuracy"]) for r in recs],
                where="post", label=model or None)
    ax.set_xlabel("L2 radius")
    ax.set_ylabel("certified accuracy")
    ax.set_ylim(-0.02, 1.02)
    if len(_groups(table, "model")) > 1:
        ax.legend()


def _plot_history(table: Table, ax):
    epochs = table.column("epoch", int)
    ax.plot(epochs, table.column("loss"), marker="o", color="C0", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy", color="C0")
    ax2 = ax.twinx()
    ax2.plot(epochs, table.column("train_accuracy"), color="C1", label="train acc")
    test = table.column("test_accuracy")
    if any(v is not None and not math.isnan(v) for v in test):
        ax2.plot(epochs, test, color="C2", label="test acc")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.grid(False)
    ax2.legend(loc="center right")


def _plot_layers(table: Table, ax):
    recs = table.records()
    labels = [f"{r['layer']}:{r['kind']}" for r in recs]
    xs = range(len(recs))
    ax.bar([x - 0.2 for x in xs], [float(r["spectral_norm"]) for r in recs], width=0.4, label=r"$\sigma_{max}$")
    masked = [float(r["masked_sigma_mean"]) if r["masked_sigma_mean"] else 0.0 for r in recs]
    ax.bar([x + 0.2 for x in xs], masked, width=0.4, label=r"masked $\sigma$ (mean)")
    ax.set_xticks(list(xs), labels)
    ax.set_ylabel("operator norm")
    ax.legend()


def _plot_grid(table: Table, ax):
    recs = table.records()
    labels = [r["c_ratio"] or "original" for r in recs]
    xs = list(range(len(recs)))
    cols = [c for c in table.columns if c.endswith("accuracy")]
    w = 0.8 / max(len(cols), 1)
    for k, c in enumerate(cols):
        ax.bar([x + (k - (len(cols) - 1) / 2) * w for x in xs], [float(r[c]) for r in recs], width=w, label=c)
    ax.set_xticks(xs, labels)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()


PLOTTERS = {
    "sweep": _plot_sweep,
    "curve": _plot_curve,
    "history": _plot_history,
    "layers": _plot_layers,
    "grid": _plot_grid,
}


def render_figures(report: Report, directory) -> list[Path]:
    """Write one PNG per plottable table; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        for s in report.sections:
            for t in s.tables:
                plot = PLOTTERS.get(t.name)
                if plot is None or not t.rows:
                    continue
                fig, ax = plt.subplots(figsize=figsize())
                plot(t, ax)
                ax.set_title(f"{report.command}: {s.name}")
                path = d / f"{s.name}.{t.name}.png"
                fig.savefig(path)
                plt.close(fig)
                written.append(path)
    return written
