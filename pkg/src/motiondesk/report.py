"""File-based evaluation reporting: JSON, CSV, and rendered figures.

One call turns a metric report into a directory of artifacts: a versioned
JSON document, a delimited table for spreadsheets, a bar chart of the
values with confidence whiskers, and, when per-run values are supplied, a
small-multiples view of run-to-run spread. Figures are rasterized headless;
no display is required.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport

REPORT_FORMAT_VERSION = 1


class ReportError(ValueError):
    """Raised for unwritable or inconsistent report requests."""


def report_to_csv(report: MetricReport) -> str:
    """Delimited form: one row per metric, blank ci95 for single runs."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "ci95", "runs"])
    for name, cell in report.to_json().items():
        ci = "" if cell["ci95"] is None else repr(cell["ci95"])
        writer.writerow([name, repr(cell["value"]), ci, cell["runs"]])
    return buf.getvalue()


def _values_figure(report: MetricReport, path: Path) -> None:
    cells = report.to_json()
    names = list(cells)
    values = [cells[n]["value"] for n in names]
    errors = [cells[n]["ci95"] or 0.0 for n in names]
    height = max(2.0, 0.5 * len(names) + 1.2)
    fig, ax = plt.subplots(figsize=(7.5, height))
    pos = range(len(names))
    ax.barh(pos, values, xerr=errors, color="#4878a8", height=0.6, capsize=3)
    ax.set_yticks(pos, names)
    ax.invert_yaxis()
    ax.set_xlabel("value")
    ax.set_title(f"{len(names)} metrics over {report.runs} run(s)")
    for p, v in zip(pos, values):
        ax.annotate(f" {v:.4g}", (v, p), va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _runs_figure(per_run: list[dict[str, float]], path: Path) -> None:
    names = list(per_run[0])
    cols = min(3, len(names))
    rows = math.ceil(len(names) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.2 * rows), squeeze=False)
    xs = range(1, len(per_run) + 1)
    for i, name in enumerate(names):
        ax = axes[i // cols][i % cols]
        ax.plot(xs, [run[name] for run in per_run], marker="o", markersize=3, color="#4878a8")
        ax.set_title(name, fontsize=9)
        ax.set_xticks(list(xs))
        ax.tick_params(labelsize=7)
    for j in range(len(names), rows * cols):
        axes[j // cols][j % cols].axis("off")
    fig.suptitle("per-run values", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(
    report: MetricReport,
    out_dir: str | Path,
    stem: str = "report",
    per_run: list[dict[str, float]] | None = None,
) -> dict[str, Path]:
    """Write ``{stem}.json``, ``{stem}.csv``, and figure files under ``out_dir``.

    Returns the written paths keyed by artifact kind ("json", "csv",
    "figure", and "runs_figure" when ``per_run`` is given). ``per_run``
    must list one mapping per run covering the same metric names.
    """
    if not report.metrics:
        raise ReportError("report has no metrics")
    if per_run is not None:
        if len(per_run) != report.runs:
            raise ReportError(f"{len(per_run)} per-run rows for {report.runs} runs")
        for row in per_run:
            if set(row) != set(report.metrics):
                raise ReportError("per-run metric names disagree with the report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "figure": out_dir / f"{stem}.png",
    }
    doc = {"format_version": REPORT_FORMAT_VERSION, "metrics": report.to_json()}
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n")
    paths["csv"].write_text(report_to_csv(report))
    _values_figure(report, paths["figure"])
    if per_run is not None:
        paths["runs_figure"] = out_dir / f"{stem}_runs.png"
        _runs_figure(per_run, paths["runs_figure"])
    return paths


def load_report(path: str | Path) -> MetricReport:
    """Read back a JSON report written by :func:`write_report`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != REPORT_FORMAT_VERSION:
        raise ReportError(f"unsupported report format_version {doc.get('format_version')!r}")
    from .metrics import MetricValue

    cells = doc["metrics"]
    if not cells:
        raise ReportError("report file has no metrics")
    runs = next(iter(cells.values()))["runs"]
    metrics = {
        name: MetricValue(value=cell["value"], ci95=cell["ci95"]) for name, cell in cells.items()
    }
    return MetricReport(metrics=metrics, runs=runs)
