"""Emit figures and tables: prediction scatter with a 45-degree line,
raw/normalized confusion heatmaps, and the per-category summary table.

All renderers draw through the object-oriented figure API (no global pyplot
state), at a fixed 1000x1000 px, so identical inputs produce byte-identical
PNGs suitable for regression testing.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .manifest import CATEGORIES
from .metrics import ConfusionMatrix, MetricsReport

log = logging.getLogger(__name__)

FIGURE_PX = 1000
_DPI = 100
MERGED_KEY = "merged"


class ReportingError(ValueError):
    pass


def _new_figure() -> Figure:
    side = FIGURE_PX / _DPI
    figure = Figure(figsize=(side, side), dpi=_DPI)
    FigureCanvasAgg(figure)
    return figure


def _metadata(run_id: str, config_hash: str) -> dict[str, str]:
    return {"run_id": run_id, "config_hash": config_hash}


def _save(figure: Figure, out: Path | str, run_id: str, config_hash: str) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(out, format="png", dpi=_DPI, metadata=_metadata(run_id, config_hash))
    return out


def render_scatter(
    report: MetricsReport,
    out: Path | str,
    run_id: str = "",
    config_hash: str = "",
    title: str = "predicted vs actual log consumption",
) -> Path:
    """Predictions on x, targets on y, identity line corner-to-corner."""
    if report.task != "regression" or report.pairs is None or not report.pairs.predictions:
        raise ReportingError("scatter needs a regression report with (prediction, target) pairs")
    preds = report.pairs.predictions
    targets = report.pairs.targets

    lo = min(min(preds), min(targets))
    hi = max(max(preds), max(targets))
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    lo, hi = lo - pad, hi + pad

    figure = _new_figure()
    axes = figure.add_subplot(111)
    axes.plot([lo, hi], [lo, hi], color="black", linewidth=1.0, zorder=1)
    axes.scatter(preds, targets, s=14, color="#1f77b4", alpha=0.75, zorder=2)
    axes.set_xlim(lo, hi)
    axes.set_ylim(lo, hi)
    axes.set_xlabel("predicted log monthly consumption")
    axes.set_ylabel("actual log monthly consumption")
    axes.set_title(title)
    annotation = "\n".join(
        f"{name} = {report.metrics[name]:.6f}" for name in ("rmse", "r2") if name in report.metrics
    )
    axes.text(
        0.03,
        0.97,
        annotation,
        transform=axes.transAxes,
        verticalalignment="top",
        fontsize=11,
        bbox={"boxstyle": "round", "facecolor": "white", "alpha": 0.8},
    )
    return _save(figure, out, run_id, config_hash)


def render_confusion(
    cm: ConfusionMatrix,
    normalized: bool,
    out: Path | str,
    run_id: str = "",
    config_hash: str = "",
    title: str | None = None,
) -> Path:
    """2x2 heatmap; blue raw counts or red row-normalized rates."""
    if normalized:
        grid = cm.normalized_rows()
        cmap, fmt = "Reds", "{:.2f}"
        vmax = 1.0
    else:
        grid = [[float(cm.tn), float(cm.fp)], [float(cm.fn), float(cm.tp)]]
        cmap, fmt = "Blues", "{:.0f}"
        vmax = max(cm.tn, cm.fp, cm.fn, cm.tp) or 1

    figure = _new_figure()
    axes = figure.add_subplot(111)
    axes.imshow(grid, cmap=cmap, vmin=0.0, vmax=vmax)
    for row in range(2):
        for col in range(2):
            value = grid[row][col]
            axes.text(
                col,
                row,
                fmt.format(value),
                ha="center",
                va="center",
                fontsize=18,
                color="white" if value > 0.6 * vmax else "black",
            )
    axes.set_xticks([0, 1], ["0", "1"])
    axes.set_yticks([0, 1], ["0", "1"])
    axes.set_xlabel("predicted label")
    axes.set_ylabel("true label")
    if title is None:
        title = "confusion matrix (row-normalized)" if normalized else "confusion matrix (counts)"
    axes.set_title(title)
    return _save(figure, out, run_id, config_hash)


def _table_rows(reports: Mapping[str, MetricsReport]) -> list[tuple[str, int, float | None, float | None]]:
    known = list(CATEGORIES) + [MERGED_KEY]
    unknown = sorted(set(reports) - set(known))
    ordered = [k for k in known if k in reports] + unknown
    rows = []
    for key in ordered:
        report = reports[key]
        rows.append(
            (key, report.n_valid, report.metrics.get("rmse"), report.metrics.get("r2"))
        )
    return rows


def render_category_table(
    reports: Mapping[str, MetricsReport],
    out: Path | str,
    run_id: str = "",
    config_hash: str = "",
) -> Path:
    """Plaintext table at ``out`` plus a CSV sibling; canonical row order."""
    if not reports:
        raise ReportingError("need at least one report for the category table")
    rows = _table_rows(reports)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def _fmt(value: float | None) -> str:
        return f"{value:.6f}" if value is not None else "-"

    width = max(len("input"), *(len(r[0]) for r in rows))
    lines = [f"{'input'.ljust(width)}  {'n':>6}  {'rmse':>10}  {'r2':>10}"]
    for key, n, rmse_value, r2_value in rows:
        lines.append(f"{key.ljust(width)}  {n:>6}  {_fmt(rmse_value):>10}  {_fmt(r2_value):>10}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")

    csv_path = out.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["input", "n", "rmse", "r2"])
        for key, n, rmse_value, r2_value in rows:
            writer.writerow([key, n, _fmt(rmse_value), _fmt(r2_value)])
    log.info("category table written to %s (+ %s)", out, csv_path.name)
    return out
