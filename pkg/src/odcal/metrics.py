"""Error measures and iteration diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

ERROR_FIELDS = ("od_cal_err", "cal_to_sim_err", "iter_err", "fp_err", "mean_speed")


@dataclass
class ErrorRecord:
    """Diagnostics of one calibrate-and-simulate round."""

    iteration: int
    od_cal_err: float
    cal_to_sim_err: float
    iter_err: float
    fp_err: float
    mean_speed: float


def rmse(y, y_star) -> float:
    """Root-mean-square error ``||y - y*||_2 / sqrt(N)``."""
    y = np.asarray(y, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    if y.shape != y_star.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_star.shape}")
    if y.size < 1:
        raise ValueError("empty vectors")
    return float(np.linalg.norm(y - y_star) / np.sqrt(y.size))


def nrmse(y, y_star) -> float:
    """RMSE normalized by the mean of the true vector, in percent."""
    y = np.asarray(y, dtype=float)
    mean = float(np.mean(y))
    if mean == 0.0:
        raise ValueError("nrmse undefined for zero-mean true vector")
    return rmse(y, y_star) / mean * 100.0


def rel_error(y, y_star) -> float:
    """Relative L2 error ``||y - y*|| / ||y||`` in percent."""
    y = np.asarray(y, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    if y.shape != y_star.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_star.shape}")
    ny = float(np.linalg.norm(y))
    if ny == 0.0:
        raise ValueError("rel_error undefined for zero true vector")
    return float(np.linalg.norm(y - y_star) / ny * 100.0)


def covariance_report(records: list[ErrorRecord]) -> np.ndarray:
    """Pairwise Pearson correlations of the five diagnostic series.

    Row/column order follows ``ERROR_FIELDS``.  Correlations involving a
    constant series are undefined and reported as NaN (diagonal stays 1).
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records")
    data = np.array(
        [[getattr(r, f) for f in ERROR_FIELDS] for r in records], dtype=float
    )
    n = data.shape[1]
    out = np.full((n, n), np.nan)
    std = data.std(axis=0)
    centered = data - data.mean(axis=0)
    for i in range(n):
        out[i, i] = 1.0
        for j in range(i + 1, n):
            if std[i] == 0.0 or std[j] == 0.0:
                continue
            c = float(np.mean(centered[:, i] * centered[:, j]) / (std[i] * std[j]))
            out[i, j] = out[j, i] = c
    return out


def write_error_records(records: list[ErrorRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration",) + ERROR_FIELDS)
        for r in records:
            writer.writerow(
                [r.iteration] + [f"{getattr(r, f):.6f}" for f in ERROR_FIELDS]
            )


def read_error_records(path: str) -> list[ErrorRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                ErrorRecord(
                    iteration=int(row["iteration"]),
                    **{f: float(row[f]) for f in ERROR_FIELDS},
                )
            )
    return records


SUMMARY_COLUMNS = (
    "time_frame",
    "real_count",
    "estimated_count",
    "od_eps",
    "od_rmse",
    "od_nrmse",
    "sensor_eps",
    "sensor_rmse",
    "sensor_nrmse",
    "estimated_trips",
)


def write_summary(rows: list[dict], path: str) -> None:
    """Per-frame report: count totals and OD / sensor error columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
