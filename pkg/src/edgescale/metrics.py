"""Forecast accuracy metrics and wall-clock timing."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=float).reshape(-1)
    p = np.asarray(predicted, dtype=float).reshape(-1)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise ValueError("need at least one value")
    return a, p


def smape(actual, predicted) -> float:
    """Symmetric MAPE in percent, ``100/n * sum |a - p| / (|a| + |p|)``.

    The denominator is not halved, so the result lies in [0, 100]. Terms
    where both values are zero contribute 0.
    """
    a, p = _pair(actual, predicted)
    num = np.abs(a - p)
    den = np.abs(a) + np.abs(p)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def rmse_normalized(rmse_value: float, scale: float) -> float:
    """RMSE divided by a common error scale (e.g. the mean absolute error at a sampling rate)."""
    if not scale > 0:
        raise ValueError("normalization scale must be positive")
    return rmse_value / scale


def timed(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, elapsed_seconds)`` on a monotonic clock."""
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0


@dataclass
class EvalReport:
    dataset: str
    rate: float
    model: str
    smape: float
    rmse: float
    rmse_norm: float
    delta_t: float
    n: int
    mae: float = float("nan")

    FIELDS = ("dataset", "rate", "model", "smape", "rmse", "rmse_norm", "delta_t")


def normalize_reports(reports: list) -> None:
    """Fill ``rmse_norm`` using the mean MAE of all reports sharing a sampling rate."""
    by_rate: dict = {}
    for r in reports:
        by_rate.setdefault(r.rate, []).append(r.mae)
    for r in reports:
        scale = float(np.mean(by_rate[r.rate]))
        r.rmse_norm = rmse_normalized(r.rmse, scale) if scale > 0 else 0.0


def write_reports(reports: list, path) -> None:
    """One CSV row per (dataset, rate, model)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EvalReport.FIELDS)
        for r in reports:
            writer.writerow([r.dataset, f"{r.rate:g}", r.model, f"{r.smape:.10g}", f"{r.rmse:.10g}",
                             f"{r.rmse_norm:.10g}", f"{r.delta_t:.6f}"])
