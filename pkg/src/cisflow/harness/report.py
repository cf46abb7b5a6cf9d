"""Per-tick run reports and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Union

HEADER = ["ts", "target_rate", "received", "processed", "batch_ms", "waiting_batches", "workers"]


class ReportWriteError(OSError):
    pass


@dataclass
class ReportRow:
    ts: int
    target_rate: int
    received: int
    processed: int
    batch_ms: float
    waiting_batches: int
    workers: int


@dataclass
class RunReport:
    rows: list[ReportRow] = field(default_factory=list)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.rows:
            ts, rate, rec, proc, batch_ms, waiting, workers = astuple(r)
            w.writerow([ts, rate, rec, proc, f"{batch_ms:.3f}", waiting, workers])
        return buf.getvalue()


def write_report_csv(report: RunReport, path: Union[str, Path]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report.to_csv())
    except OSError as exc:
        raise ReportWriteError(f"cannot write report to {path}: {exc}") from exc
