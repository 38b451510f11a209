"""Metric-vs-split SVG figures from a results CSV."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import ResultRow, aggregate, read_rows  # noqa: E402

log = logging.getLogger(__name__)

PLOT_METRICS = ("test_accuracy", "avg_reward", "entropy")
STYLE = {
    "svg.hashsalt": "idmlab",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "figure.figsize": (5.0, 3.5),
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _geometric(splits: list[float]) -> bool:
    s = sorted(set(splits))
    if len(s) < 3:
        return False
    ratios = np.array(s[1:]) / np.array(s[:-1])
    return bool(ratios.max() / ratios.min() < 3.0 and ratios.min() > 1.5)


def plot_rows(rows: list[ResultRow], out_dir, methods: list[str] | None = None, metrics=PLOT_METRICS) -> list[Path]:
    """One SVG per (experiment, env, metric): one series per method, mean +- std band."""
    if methods is not None:
        rows = [r for r in rows if r.method in methods]
    rows = [r for r in rows if r.metric in metrics]
    if not rows:
        log.warning("no rows left after the method/metric filter; nothing plotted")
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = aggregate(rows)
    panels: dict[tuple, list[dict]] = {}
    for d in summary:
        panels.setdefault((d["experiment"], d["env"], d["metric"]), []).append(d)
    written = []
    with plt.rc_context(STYLE):
        for (experiment, env, metric), cells in sorted(panels.items()):
            fig, ax = plt.subplots()
            for method in sorted({c["method"] for c in cells}):
                series = sorted((c for c in cells if c["method"] == method), key=lambda c: c["split_fraction"])
                x = np.array([c["split_fraction"] for c in series])
                m = np.array([c["mean"] for c in series])
                sd = np.array([c["std"] for c in series])
                ax.plot(x, m, marker="o", ms=3, label=method)
                ax.fill_between(x, m - sd, m + sd, alpha=0.2)
            splits = [c["split_fraction"] for c in cells]
            if _geometric(splits):
                ax.set_xscale("log")
            ax.set_xlabel("train split")
            ax.set_ylabel(metric)
            ax.set_title(f"{experiment} / {env}")
            ax.legend(loc="best")
            fig.tight_layout()
            path = out_dir / f"{experiment}_{env}_{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "idmlab"})
            plt.close(fig)
            written.append(path)
    return written


def plot_csv(csv_path, out_dir=None, methods: list[str] | None = None) -> list[Path]:
    csv_path = Path(csv_path)
    return plot_rows(read_rows(csv_path), out_dir or csv_path.parent, methods)
