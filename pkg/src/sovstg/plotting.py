"""Convergence curves from metrics CSVs."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import read_metrics  # noqa: E402

REQUIRED = ("epoch", "full")
TIDY_COLUMNS = ("run", "epoch", "metric", "value")


class MetricsFormatError(ValueError):
    pass


def load_runs(paths, names=None) -> dict[str, list[dict]]:
    runs = {}
    for i, path in enumerate(paths):
        path = Path(path)
        rows = read_metrics(path)
        columns = set(rows[0]) if rows else set()
        missing = [c for c in REQUIRED if c not in columns]
        if missing:
            raise MetricsFormatError(f"{path}: missing column(s) {missing}")
        name = names[i] if names else (path.parent.name or path.stem)
        if name in runs:
            name = f"{name}_{i}"
        runs[name] = rows
    return runs


def tidy_rows(runs: dict[str, list[dict]]) -> list[dict]:
    out = []
    for run, rows in runs.items():
        for r in rows:
            for metric, value in r.items():
                if metric == "epoch":
                    continue
                out.append({"run": run, "epoch": int(r["epoch"]), "metric": metric, "value": float(value)})
    return out


def curves_figure(runs: dict[str, list[dict]], metric: str = "full"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run, rows in runs.items():
        pts = [(int(r["epoch"]), float(r[metric])) for r in rows if not math.isnan(float(r[metric]))]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=run)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mAP" if metric == "full" else metric)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def emit_curves(paths, out, names=None, metric: str = "full") -> tuple[Path, Path]:
    """Overlay ``metric``-vs-epoch curves, one per run; also write ``<out>.csv`` in tidy form."""
    if not paths:
        raise ValueError("need at least one metrics CSV")
    runs = load_runs(paths, names)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)

    fig = curves_figure(runs, metric)
    fig.savefig(out)
    plt.close(fig)

    tidy = out.with_suffix(".csv")
    with open(tidy, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIDY_COLUMNS)
        w.writeheader()
        w.writerows(tidy_rows(runs))
    return out, tidy
