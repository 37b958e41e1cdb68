"""RMSE, RSE and CORR on denormalized GHI, overall and per day."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REPORT_COLUMNS = ["horizon_min", "n", "rmse", "rse", "corr"]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    n: int
    rmse: float
    rse: float | None  # None when the observations have zero variance
    corr: float | None  # None when either series has zero variance
    horizon: int = 120

    def row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.horizon, self.n, fmt(self.rmse), fmt(self.rse), fmt(self.corr)]


def compute_metrics(y, y_hat, horizon: int = 120) -> MetricsReport:
    """Evaluate a forecast against observations (both in W/m^2).

    Undefined ratios (constant observations or predictions) are reported as
    ``None`` rather than NaN.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise MetricsError(f"series must be equal-length vectors, got {y.shape} and {y_hat.shape}")
    n = y.shape[0]
    if n < 2:
        raise MetricsError("at least two samples are required")
    err = y - y_hat
    sse = float(np.dot(err, err))
    dy = y - y.mean()
    dh = y_hat - y_hat.mean()
    syy = float(np.dot(dy, dy))
    shh = float(np.dot(dh, dh))
    rse = math.sqrt(sse / syy) if syy > 0 else None
    corr = None
    if syy > 0 and shh > 0:
        corr = float(np.dot(dy, dh)) / math.sqrt(syy * shh)
        corr = max(-1.0, min(1.0, corr))
    return MetricsReport(n=n, rmse=math.sqrt(sse / n), rse=rse, corr=corr, horizon=horizon)


def daily_rmse(dates: Sequence[dt.date], y, y_hat) -> list[tuple[dt.date, float]]:
    """RMSE per local calendar day, chronologically ordered."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if not (len(dates) == len(y) == len(y_hat)):
        raise MetricsError("dates, y and y_hat must have equal length")
    groups: dict[dt.date, list[int]] = {}
    for i, d in enumerate(dates):
        groups.setdefault(d, []).append(i)
    out = []
    for d in sorted(groups):
        idx = groups[d]
        e = y[idx] - y_hat[idx]
        out.append((d, math.sqrt(float(np.dot(e, e)) / len(idx))))
    return out


def write_report(path, report: MetricsReport, daily: Iterable[tuple[dt.date, float]] = ()) -> None:
    """CSV: the summary header/row, then a blank line and ``date,rmse`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow(report.row())
        daily = list(daily)
        if daily:
            w.writerow([])
            w.writerow(["date", "rmse"])
            for d, r in daily:
                w.writerow([d.isoformat(), repr(float(r))])


def read_report(path) -> tuple[dict, list[tuple[str, float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise MetricsError(f"{path}: not a metrics report")
    summary = dict(zip(REPORT_COLUMNS, rows[1]))
    daily = [(r[0], float(r[1])) for r in rows[4:] if r]
    return summary, daily
