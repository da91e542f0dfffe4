"""Metric-panel reports: CSV export/import and a plain-text table.

A report row is (name, source, lesion panel, patient panel).  The text
rendering groups columns as Lesion-Level then Patient-Level, the layout
used by the published benchmark tables; published reference rows are
marked by their ``source`` so nobody mistakes them for reproduced
numbers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .evaluation import MetricPanel

__all__ = ["ReportRow", "render_csv", "parse_csv", "render_text", "write_report"]

_METRICS = MetricPanel.METRICS
_CSV_FIELDS = ("name", "source") + tuple(f"lesion_{m}" for m in _METRICS) + tuple(
    f"patient_{m}" for m in _METRICS
)


@dataclass(frozen=True)
class ReportRow:
    name: str
    source: str  # "run" | "published-reference"
    lesion: MetricPanel
    patient: MetricPanel


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else f"{value:.4f}"


def _parse_value(text: str) -> float:
    return math.nan if text == "" else float(text)


def render_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for row in rows:
        record = [row.name, row.source]
        record += [_fmt(getattr(row.lesion, m)) for m in _METRICS]
        record += [_fmt(getattr(row.patient, m)) for m in _METRICS]
        writer.writerow(record)
    return buf.getvalue()


def parse_csv(text: str) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigError("empty report CSV") from None
    if tuple(header) != _CSV_FIELDS:
        raise ConfigError(f"report CSV header mismatch: {header}")
    rows = []
    for record in reader:
        if len(record) != len(_CSV_FIELDS):
            raise ConfigError(f"report CSV row has {len(record)} fields, expected {len(_CSV_FIELDS)}")
        lesion = MetricPanel("lesion", *[_parse_value(v) for v in record[2:8]])
        patient = MetricPanel("patient", *[_parse_value(v) for v in record[8:14]])
        rows.append(ReportRow(record[0], record[1], lesion, patient))
    return rows


def render_text(rows: list[ReportRow]) -> str:
    """Fixed-width table, column groups Lesion-Level then Patient-Level."""
    name_w = max([len("model")] + [len(r.name) for r in rows]) + 2
    col_w = 8
    headers = [m.replace("roc_auc", "ROC-AUC").upper() if m == "roc_auc" else m.upper() for m in _METRICS]
    group_w = col_w * len(_METRICS)
    lines = [
        " " * name_w + "| " + "Lesion-Level".center(group_w) + " | " + "Patient-Level".center(group_w),
        "model".ljust(name_w) + "| " + "".join(h.center(col_w) for h in headers) + " | "
        + "".join(h.center(col_w) for h in headers),
        "-" * (name_w + 2 * group_w + 4),
    ]
    for row in rows:
        cells_l = "".join((_fmt(getattr(row.lesion, m)) or "-").center(col_w) for m in _METRICS)
        cells_p = "".join((_fmt(getattr(row.patient, m)) or "-").center(col_w) for m in _METRICS)
        tag = row.name if row.source == "run" else f"{row.name} *"
        lines.append(tag.ljust(name_w) + "| " + cells_l + " | " + cells_p)
    if any(r.source != "run" for r in rows):
        lines.append("")
        lines.append("* published reference values (clinical cohorts, not reproduced here)")
    return "\n".join(lines) + "\n"


def write_report(out_dir, rows: list[ReportRow], stem: str = "metrics") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    txt_path = out_dir / f"{stem}.txt"
    csv_path.write_text(render_csv(rows))
    txt_path.write_text(render_text(rows))
    return csv_path, txt_path
