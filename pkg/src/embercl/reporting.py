"""Run reports: the post-task accuracy matrix, derived metrics (average
accuracy, signed forgetting, count-weighted overall accuracy), and
deterministic emission as JSON, CSV, or SVG curves.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .errors import BAD_MANIFEST, DataFormatError

REPORT_SCHEMA_VERSION = "embercl-report-v1"


def _check_full_matrix(matrix: list[list[float]]) -> int:
    t = len(matrix)
    if t == 0 or any(len(row) != t for row in matrix):
        raise ValueError(f"need a full TxT accuracy matrix, got rows {[len(r) for r in matrix]}")
    return t


def _check_rect_matrix(matrix: list[list[float]]) -> tuple[int, int]:
    # emission also serves partial / single-phase runs, so rows x cols
    # only needs to be rectangular here
    if not matrix or not matrix[0]:
        raise ValueError("accuracy matrix is empty")
    cols = len(matrix[0])
    if any(len(row) != cols for row in matrix):
        raise ValueError(f"ragged accuracy matrix: rows {[len(r) for r in matrix]}")
    return len(matrix), cols


def average_accuracy(matrix: list[list[float]]) -> float:
    """Mean of the final row: average accuracy over all tasks after the
    last task finished training."""
    t = _check_full_matrix(matrix)
    return sum(matrix[t - 1]) / t


def forgetting(matrix: list[list[float]]) -> tuple[list[float], float]:
    """Signed forgetting per task j < T-1: the best accuracy task j reached
    at any point from its own training up to the penultimate task, minus
    its final accuracy. Negative values mean backward transfer; they are
    kept, not clamped."""
    t = _check_full_matrix(matrix)
    if t < 2:
        raise ValueError("forgetting is undefined for a single-task run")
    per_task = []
    for j in range(t - 1):
        best = max(matrix[i][j] for i in range(j, t - 1))
        per_task.append(best - matrix[t - 1][j])
    return per_task, sum(per_task) / len(per_task)


def overall_accuracy(per_task_acc: list[float], test_counts: list[int]) -> float:
    """Question-count-weighted mean, i.e. accuracy over the pooled test set."""
    if len(per_task_acc) != len(test_counts):
        raise ValueError("per-task accuracies and counts must align")
    if any(c <= 0 for c in test_counts):
        raise ValueError(f"test counts must be positive, got {test_counts}")
    total = sum(test_counts)
    return sum(a * c for a, c in zip(per_task_acc, test_counts)) / total


@dataclass
class RunReport:
    """Everything a finished run reports; derived metrics are recomputable
    from the matrix and test counts."""

    mode: str
    seed: int
    config: dict
    task_ids: list[int]
    task_names: list[str]
    test_counts: list[int]
    per_task_final: list[float]
    overall: float
    accuracy_matrix: list[list[float]] | None = None
    average_accuracy: float | None = None
    forgetting_per_task: list[float] | None = None
    mean_forgetting: float | None = None
    hyper_trace: list[dict] = field(default_factory=list)
    dataset_access: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    engine_version: str = __version__
    schema_version: str = REPORT_SCHEMA_VERSION

    def without_timing(self) -> "RunReport":
        """Copy with timing zeroed, for byte-reproducible file emission."""
        return replace(self, wall_clock_seconds=0.0)


def report_to_dict(report: RunReport) -> dict:
    return asdict(report)


def report_from_dict(doc: dict) -> RunReport:
    try:
        return RunReport(**doc)
    except TypeError as e:
        raise DataFormatError(BAD_MANIFEST, f"malformed report document: {e}") from e


def emit_report(report: RunReport, fmt: str, path) -> None:
    """Write one rendering of the report. Formats: "json" (machine-readable,
    stable key order), "csv" (accuracy-matrix dump), "svg" (per-task
    accuracy curves). Identical reports emit identical bytes."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        if report.accuracy_matrix is None:
            raise ValueError("report has no accuracy matrix to dump")
        path.write_text(matrix_to_csv(report.accuracy_matrix, report.task_names))
    elif fmt == "svg":
        if report.accuracy_matrix is None:
            raise ValueError("report has no accuracy matrix to plot")
        path.write_text(curves_svg(report.accuracy_matrix, report.task_names))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report(path) -> RunReport:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(BAD_MANIFEST, f"report is not valid JSON: {e}") from e
    return report_from_dict(doc)


def matrix_to_csv(matrix: list[list[float]], task_names: list[str]) -> str:
    _check_rect_matrix(matrix)
    lines = ["after_task," + ",".join(task_names)]
    for i, row in enumerate(matrix):
        lines.append(str(i) + "," + ",".join(repr(v) for v in row))
    return "\n".join(lines) + "\n"


def matrix_from_csv(text: str) -> list[list[float]]:
    lines = [line for line in text.splitlines() if line.strip()]
    return [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]


def curves_svg(matrix: list[list[float]], task_names: list[str]) -> str:
    """Accuracy-vs-task-index curves, one polyline per task."""
    rows, cols = _check_rect_matrix(matrix)
    width, height, margin = 640, 400, 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def sx(i: float) -> float:
        return margin + (plot_w * i / max(rows - 1, 1))

    def sy(acc: float) -> float:
        return margin + plot_h * (1.0 - acc / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]
    for j in range(cols):
        points = " ".join(f"{sx(i):.2f},{sy(matrix[i][j]):.2f}" for i in range(rows))
        color = palette[j % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{sy(matrix[rows - 1][j]):.2f}" '
            f'font-size="12" fill="{color}">{task_names[j]}</text>'
        )
    parts.append(
        f'<text x="{margin}" y="{margin - 10}" font-size="12" fill="black">'
        "accuracy (%) on each task after finishing task i</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_accuracy_table(rows: list[tuple[str, float, list[float]]], task_names: list[str]) -> str:
    """Fixed-width table: one row per run variant, columns Overall then the
    per-task accuracies."""
    header = ["Method", "Overall"] + list(task_names)
    body = [[label] + [f"{overall:.2f}"] + [f"{a:.2f}" for a in per_task]
            for label, overall, per_task in rows]
    widths = [max(len(str(r[c])) for r in [header] + body) for c in range(len(header))]
    fmt_row = lambda r: "  ".join(str(v).ljust(w) for v, w in zip(r, widths))
    lines = [fmt_row(header), fmt_row(["-" * w for w in widths])]
    lines.extend(fmt_row(r) for r in body)
    return "\n".join(lines)
