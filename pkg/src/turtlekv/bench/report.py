"""CSV and aligned-text rendering of metrics rows."""

from __future__ import annotations

import csv
import io

from .runner import RunMetrics

COLUMNS = (
    "workload",
    "chi",
    "threads",
    "ops_sec",
    "p50_us",
    "p95_us",
    "p99_us",
    "write_amp",
    "space_amp",
    "peak_mem_mb",
    "wall_s",
)
# appended only when some row carries them
OPTIONAL_COLUMNS = ("retune_ms", "valid")
TIMING_COLUMNS = frozenset({"ops_sec", "p50_us", "p95_us", "p99_us", "wall_s", "retune_ms"})


class EmptyReport(ValueError):
    pass


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def columns_for(rows: list[RunMetrics]) -> list[str]:
    cols = list(COLUMNS)
    if any(r.retune_ms is not None for r in rows):
        cols.append("retune_ms")
    if any(not r.valid for r in rows):
        cols.append("valid")
    return cols


def table_rows(rows: list[RunMetrics]) -> tuple[list[str], list[list[str]]]:
    if not rows:
        raise EmptyReport("no metrics rows to report")
    cols = columns_for(rows)
    return cols, [[_fmt(getattr(r, c)) for c in cols] for r in rows]


def to_csv(rows: list[RunMetrics]) -> str:
    cols, body = table_rows(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    w.writerows(body)
    return buf.getvalue()


def to_text(rows: list[RunMetrics]) -> str:
    cols, body = table_rows(rows)
    widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def report(rows: list[RunMetrics], csv_path: str | None = None) -> str:
    """Write the CSV (if a path is given) and return the text table."""
    text = to_text(rows)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            f.write(to_csv(rows))
    return text
