"""Figures for the report path: benchmark tables and distance histograms.

Rendering happens off-screen (Agg). The CSV / JSON artifacts stay the data of
record; figures are derived from them and may be regenerated at any time.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    # keep PNG output stable across runs
    "svg.hashsalt": "pcfusion",
}
_PNG_META = {"Software": None}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = float(v)
            except (TypeError, ValueError):
                pass
    return rows


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def _finite(values: Iterable[float]) -> list[float]:
    return [v for v in values if isinstance(v, float) and math.isfinite(v)]


def plot_registration_table(rows: Sequence[dict], path) -> Path:
    """Grouped bars of mean transform error per perturbation range and method (log scale)."""
    ranges = list(dict.fromkeys(r["range"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for k, m in enumerate(methods):
            means = []
            for rg in ranges:
                vals = _finite(r["mean_abs"] for r in rows if r["range"] == rg and r["method"] == m)
                means.append(sum(vals) / len(vals) if vals else float("nan"))
            xs = [i + (k - (len(methods) - 1) / 2) * width for i in range(len(ranges))]
            ax.bar(xs, means, width, label=m)
        ax.set_xticks(range(len(ranges)))
        ax.set_xticklabels(ranges)
        ax.set_yscale("log")
        ax.set_xlabel("perturbation range (mm / deg)")
        ax.set_ylabel("mean |transform error|")
        ax.legend()
        return _save(fig, path)


def plot_metric_sweeps(rows: Sequence[dict], out_dir) -> list[Path]:
    """One figure per sweep: deviation vs sweep value, a panel per shape, a line per metric."""
    out = []
    for sweep in dict.fromkeys(r["sweep"] for r in rows):
        sub = [r for r in rows if r["sweep"] == sweep]
        shapes = list(dict.fromkeys(r["shape"] for r in sub))
        metrics = list(dict.fromkeys(r["metric"] for r in sub))
        with plt.rc_context(_STYLE):
            fig, axes = plt.subplots(1, len(shapes), figsize=(3.0 * len(shapes), 3.0),
                                     sharey=True, squeeze=False)
            for ax, shape in zip(axes[0], shapes):
                for m in metrics:
                    pts = sorted((r["value"], r["deviation"]) for r in sub
                                 if r["shape"] == shape and r["metric"] == m)
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=m)
                ax.set_title(shape)
                ax.set_xlabel(sweep)
            axes[0][0].set_ylabel("|estimate - ground truth| (m)")
            axes[0][-1].legend(loc="upper left", bbox_to_anchor=(1.0, 1.0))
            fig.tight_layout()
            out.append(_save(fig, Path(out_dir) / f"metrics_{sweep}.png"))
    return out


def plot_histogram(report: dict, path) -> Path:
    """Bar plot of a measure report's distance histogram."""
    hist = report["histogram"]
    edges, counts = hist["bin_edges"], hist["counts"]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.stairs(counts, edges, fill=True, alpha=0.7)
        ax.axvline(report["mean"], color="k", lw=1, ls="--", label=f"mean {report['mean']:.4g}")
        ax.set_xlabel(f"{report['metric']} distance")
        ax.set_ylabel("points")
        ax.legend()
        return _save(fig, path)


def render_report(out_dir, *, registration_csv=None, metrics_csv=None, measure_json=None) -> list[Path]:
    out_dir = Path(out_dir)
    made = []
    if registration_csv:
        made.append(plot_registration_table(read_csv(registration_csv), out_dir / "registration.png"))
    if metrics_csv:
        made += plot_metric_sweeps(read_csv(metrics_csv), out_dir)
    if measure_json:
        report = json.loads(Path(measure_json).read_text())
        made.append(plot_histogram(report, out_dir / f"histogram_{Path(measure_json).stem}.png"))
    return made
