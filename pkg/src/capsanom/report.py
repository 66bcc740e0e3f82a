"""Comparison tables and figures assembled from evaluation reports.

``write_comparison`` merges per-run report CSVs into one models-by-datasets
table, one series CSV per headline metric (rows = datasets, columns =
models), and one grouped bar chart per metric rendered to SVG next to the
CSVs. Missing (model, dataset) cells render as "n/a", never as zeros.

All outputs are byte-deterministic: rows are sorted, floats use shortest
round-trip formatting, and the SVGs carry no timestamps.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from capsanom.metrics import EvalReport

# the ensemble/boosting baselines are out of scope; tables say so explicitly
NOT_REPRODUCED = ("random_forest", "xgboost")

PLOT_METRICS = ("f1", "auroc", "accuracy")

matplotlib.rcParams["svg.hashsalt"] = "capsanom"


def merge_reports(reports: list[EvalReport]) -> list[EvalReport]:
    """Sort by (dataset, model) and reject duplicate cells."""
    seen: dict[tuple[str, str], int] = {}
    duplicates = []
    for r in reports:
        key = (r.dataset, r.model)
        seen[key] = seen.get(key, 0) + 1
        if seen[key] == 2:
            duplicates.append(key)
    if duplicates:
        listing = ", ".join(f"{m} on {d}" for d, m in sorted(duplicates))
        raise ValueError(f"duplicate report rows: {listing}")
    return sorted(reports, key=lambda r: (r.dataset, r.model))


def _fmt(x: float) -> str:
    return repr(float(x))


def comparison_table(reports: list[EvalReport]) -> str:
    """Flat CSV: one row per (dataset, model) with the five metrics."""
    rows = merge_reports(reports)
    lines = [
        "# not reproduced (out of scope): " + ", ".join(NOT_REPRODUCED),
        "dataset,model,accuracy,auroc,precision,recall,f1",
    ]
    for r in rows:
        lines.append(
            ",".join(
                [r.dataset, r.model, _fmt(r.accuracy), _fmt(r.auroc),
                 _fmt(r.precision), _fmt(r.recall), _fmt(r.f1)]
            )
        )
    return "\n".join(lines) + "\n"


def metric_series(reports: list[EvalReport], metric: str) -> str:
    """CSV with datasets as rows and models as columns; gaps are n/a."""
    rows = merge_reports(reports)
    datasets = sorted({r.dataset for r in rows})
    models = sorted({r.model for r in rows})
    cells = {(r.dataset, r.model): getattr(r, metric) for r in rows}
    lines = ["dataset," + ",".join(models)]
    for ds in datasets:
        values = [
            _fmt(cells[(ds, m)]) if (ds, m) in cells else "n/a" for m in models
        ]
        lines.append(ds + "," + ",".join(values))
    return "\n".join(lines) + "\n"


def plot_metric(reports: list[EvalReport], metric: str, path: str | Path) -> None:
    """Grouped bar chart of one metric across datasets, one bar per model."""
    rows = merge_reports(reports)
    datasets = sorted({r.dataset for r in rows})
    models = sorted({r.model for r in rows})
    cells = {(r.dataset, r.model): getattr(r, metric) for r in rows}

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(datasets)), 3.6))
    width = 0.8 / len(models)
    for mi, model in enumerate(models):
        xs, ys = [], []
        for di, ds in enumerate(datasets):
            if (ds, model) in cells:
                xs.append(di + (mi - (len(models) - 1) / 2) * width)
                ys.append(cells[(ds, model)])
        ax.bar(xs, ys, width=width, label=model)
    ax.set_xticks(range(len(datasets)))
    ax.set_xticklabels(datasets, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_comparison(
    reports: list[EvalReport], out_dir: str | Path, plots: bool = True
) -> list[Path]:
    """Write the comparison table, per-metric series, and optional figures.

    Returns the list of files written.
    """
    if not reports:
        raise ValueError("no reports to compare")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    table_path = out_dir / "comparison.csv"
    table_path.write_text(comparison_table(reports), encoding="utf-8")
    written.append(table_path)
    for metric in PLOT_METRICS:
        series_path = out_dir / f"{metric}.csv"
        series_path.write_text(metric_series(reports, metric), encoding="utf-8")
        written.append(series_path)
        if plots:
            fig_path = out_dir / f"{metric}.svg"
            plot_metric(reports, metric, fig_path)
            written.append(fig_path)
    return written
