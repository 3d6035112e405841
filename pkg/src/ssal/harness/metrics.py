"""metrics.csv: one row per (trial, cycle), fixed six-decimal formatting."""

from __future__ import annotations

import csv
import math
from pathlib import Path

BASE_COLUMNS = ["trial", "cycle", "labelled", "accuracy", "seconds"]


def header(num_classes: int) -> list[str]:
    return BASE_COLUMNS + [f"acc_class_{c}" for c in range(num_classes)]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_metrics_csv(rows, path, record_seconds: bool = False) -> Path:
    """Rows are written trial-major, cycle-minor whatever order they arrive in.

    Wall-clock seconds are written as 0.000000 unless ``record_seconds`` is
    set, so repeated runs produce byte-identical files by default.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no metrics rows to write")
    num_classes = len(rows[0].per_class)
    if any(len(r.per_class) != num_classes for r in rows):
        raise ValueError("rows disagree on the number of classes")
    rows.sort(key=lambda r: (r.trial, r.cycle))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header(num_classes))
        for r in rows:
            secs = r.seconds if record_seconds else 0.0
            w.writerow([r.trial, r.cycle, r.labelled, _fmt(r.accuracy), _fmt(secs)] + [_fmt(a) for a in r.per_class])
    return path


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics file back into dicts with int/float values."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if cols[: len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise ValueError(f"unexpected metrics header {cols}")
        out = []
        for row in reader:
            rec = {k: int(row[k]) for k in ("trial", "cycle", "labelled")}
            rec["accuracy"] = float(row["accuracy"])
            rec["seconds"] = float(row["seconds"])
            rec["per_class"] = tuple(float(row[c]) for c in cols[len(BASE_COLUMNS):])
            out.append(rec)
    return out
