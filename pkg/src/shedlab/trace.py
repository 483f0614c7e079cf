"""Run traces and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np

HEADER = ("step", "t", "lr", "target_keep", "actual_keep", "explicit_cum", "shed_cum",
          "loss", "train_acc", "eval_acc")
_INT_COLUMNS = {"step", "explicit_cum", "shed_cum"}


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRow:
    step: int
    t: float
    lr: float
    target_keep: float
    actual_keep: float
    explicit_cum: int
    shed_cum: int
    loss: float
    train_acc: float
    eval_acc: float | None = None


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    # threshold after each row's top-up; kept in memory only, not part of the CSV
    thresholds: list = field(default_factory=list)

    def append(self, row: TraceRow, threshold: float | None = None):
        self.rows.append(row)
        if threshold is not None:
            self.thresholds.append(threshold)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        if name not in HEADER:
            raise KeyError(name)
        vals = [getattr(r, name) for r in self.rows]
        if name == "eval_acc":
            return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)
        return np.array(vals, dtype=np.int64 if name in _INT_COLUMNS else np.float64)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def format_trace(trace: RunTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for row in trace.rows:
        w.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def write_trace(trace: RunTrace, path) -> None:
    Path(path).write_text(format_trace(trace), encoding="ascii")


def read_trace(path) -> RunTrace:
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != HEADER:
            raise TraceFormatError(f"{path}: line 1: header must be {','.join(HEADER)}")
        trace = RunTrace()
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(HEADER):
                raise TraceFormatError(f"{path}: line {lineno}: expected {len(HEADER)} fields, got {len(rec)}")
            vals = {}
            try:
                for name, text in zip(HEADER, rec):
                    if name == "eval_acc":
                        vals[name] = float(text) if text else None
                    elif name in _INT_COLUMNS:
                        vals[name] = int(text)
                    else:
                        vals[name] = float(text)
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
            trace.append(TraceRow(**vals))
    return trace
