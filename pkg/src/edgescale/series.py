"""Ingress-rate series, event-log aggregation and synthetic load generation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled load values starting at epoch ``t0``.

    ``values[i]`` is the number of events that arrived in the tumbling
    window ``[t0 + i*sampling_rate, t0 + (i+1)*sampling_rate)``.
    """

    t0: float
    sampling_rate: float
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValueError("time series must be non-empty")
        if not self.sampling_rate > 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def timestamps(self) -> np.ndarray:
        return self.t0 + self.sampling_rate * np.arange(len(self))

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.t0, self.sampling_rate, values, self.seed)


@dataclass
class EventLog:
    timestamps: np.ndarray

    def __post_init__(self):
        ts = np.sort(np.asarray(self.timestamps, dtype=float).reshape(-1))
        if not np.all(np.isfinite(ts)):
            raise ValueError("event timestamps must be finite")
        self.timestamps = ts

    def __len__(self) -> int:
        return self.timestamps.size


@dataclass(frozen=True)
class SimConfig:
    """Settings for the IoT load simulation.

    ``alpha_base`` is the adjustment factor applied when the new sampling
    rate equals the base rate; the effective factor is
    ``alpha_base / (sampling_rate / base_rate)``.
    """

    sampling_rate: float
    noise_fraction: float = 0.10
    alpha_base: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sampling_rate > 0:
            raise ValueError("sampling rate must be positive")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TargetStats:
    mu_t: float
    sigma_t: float

    def __post_init__(self):
        if self.sigma_t < 0:
            raise ValueError("sigma_t must be nonnegative")


def _parse_timestamp(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest_event_log(path) -> EventLog:
    """Read one timestamp per record from a CSV (first column) or plain text file.

    Timestamps may be epoch seconds or ISO-8601 strings (naive values are
    taken as UTC). A non-numeric first line is treated as a header.
    """
    stamps: list[float] = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            field_ = line.split(",", 1)[0].strip().strip('"')
            try:
                stamps.append(_parse_timestamp(field_))
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}: line {lineno}: cannot parse timestamp {field_!r}")
    if not stamps:
        raise ValueError(f"{path}: no events")
    return EventLog(np.array(stamps))


def count_per_window(log: EventLog, sampling_rate: float) -> TimeSeries:
    """Aggregate events into tumbling windows of width ``sampling_rate``.

    Windows are anchored at the first timestamp floored to a multiple of
    the window width.
    """
    if not sampling_rate > 0:
        raise ValueError("sampling rate must be positive")
    ts = log.timestamps
    if ts.size == 0:
        raise ValueError("event log is empty")
    t0 = math.floor(ts[0] / sampling_rate) * sampling_rate
    idx = np.floor((ts - t0) / sampling_rate).astype(np.int64)
    counts = np.bincount(idx)
    return TimeSeries(t0, sampling_rate, counts.astype(float))


def cubic_spline_interpolate(xs, ys, query) -> np.ndarray:
    """Natural cubic spline through ``(xs, ys)`` evaluated at ``query``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    query = np.asarray(query, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D arrays of equal length")
    if xs.size < 2:
        raise ValueError("need at least two knots")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("knots must be strictly increasing (duplicate or unsorted knot)")
    if query.size and (query.min() < xs[0] or query.max() > xs[-1]):
        raise ValueError("query point outside the knot range")
    spline = CubicSpline(xs, ys, bc_type="natural")
    out = spline(query)
    # pin exact knot hits so the interpolation property holds bit-for-bit
    pos = np.searchsorted(xs, query)
    pos = np.clip(pos, 0, xs.size - 1)
    hit = xs[pos] == query
    out = np.where(hit, ys[pos], out)
    return out


def adjustment_factor(base_rate: float, new_rate: float, alpha_base: float = 1.0) -> float:
    return alpha_base / (new_rate / base_rate)


def simulate_iot_load(base: TimeSeries, cfg: SimConfig, cast: bool = True) -> TimeSeries:
    """Resample ``base`` onto a new window width with scaling and noise.

    The base load is fit with a natural cubic spline over elapsed seconds
    and evaluated on the new axis, scaled by the adjustment factor and
    perturbed by multiplicative uniform noise in
    ``[-noise_fraction, +noise_fraction]``. With ``cast`` the values are
    clamped at zero (NaN -> 0) and rounded half-up to integers; otherwise
    the raw noisy values are returned.
    """
    if len(base) < 2:
        raise ValueError("base series needs at least two points")
    tau = base.sampling_rate * np.arange(len(base))
    n_new = int(math.floor(tau[-1] / cfg.sampling_rate + 1e-9)) + 1
    tau_new = cfg.sampling_rate * np.arange(n_new)
    tau_new = np.minimum(tau_new, tau[-1])
    smooth = cubic_spline_interpolate(tau, base.values, tau_new)

    alpha = adjustment_factor(base.sampling_rate, cfg.sampling_rate, cfg.alpha_base)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.uniform(-cfg.noise_fraction, cfg.noise_fraction, size=n_new)
    values = alpha * smooth * (1.0 + noise)
    if cast:
        values = np.nan_to_num(values, nan=0.0)
        values = np.floor(np.maximum(values, 0.0) + 0.5)
    return TimeSeries(base.t0, cfg.sampling_rate, values, seed=cfg.seed)


def match_statistics(series: TimeSeries, target: TargetStats) -> TimeSeries:
    """Shift and scale ``series`` to the target mean and (population) std."""
    v = series.values
    if v.size < 2:
        raise ValueError("need at least two points")
    mu, sd = v.mean(), v.std()
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("degenerate series: zero variance")
    z = (v - mu) / sd
    out = z * target.sigma_t + target.mu_t
    # remove the O(eps) drift the affine map leaves in the moments
    if target.sigma_t > 0:
        out = (out - out.mean()) * (target.sigma_t / out.std()) + target.mu_t
    return series.with_values(out)


def train_test_split(series: TimeSeries, train_fraction: float = 0.8):
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(series)
    if n < 2:
        raise ValueError("series needs at least two points")
    n_train = int(math.floor(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} points at {train_fraction} leaves an empty part")
    train = TimeSeries(series.t0, series.sampling_rate, series.values[:n_train], series.seed)
    test = TimeSeries(series.t0 + n_train * series.sampling_rate, series.sampling_rate,
                      series.values[n_train:], series.seed)
    return train, test


@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @classmethod
    def fit(cls, values, allow_constant: bool = False) -> "MinMaxScaler":
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            if not allow_constant:
                raise ValueError("cannot min-max normalize a constant series")
            hi = lo + max(abs(lo), 1.0)
        return cls(lo, hi)

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lo) / self.span

    def inverse(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.span + self.lo


def minmax_normalize(series: TimeSeries):
    scaler = MinMaxScaler.fit(series.values)
    return series.with_values(scaler.transform(series.values)), scaler


def save_series(series: TimeSeries, path) -> None:
    """Write ``timestamp,value`` CSV plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", "value"])
        for t, v in zip(series.timestamps, series.values):
            writer.writerow([repr(float(t)), repr(float(v))])
    meta = {"t0": series.t0, "sampling_rate": series.sampling_rate, "seed": series.seed, "n": len(series)}
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_series(path) -> TimeSeries:
    path = Path(path)
    stamps, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                stamps.append(float(row[0]))
                values.append(float(row[1]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}: line {lineno}: malformed row {row!r}")
    meta_path = path.with_suffix(".meta.json")
    seed = None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        rate, t0, seed = meta["sampling_rate"], meta["t0"], meta.get("seed")
    else:
        if len(stamps) < 2:
            raise ValueError(f"{path}: cannot infer sampling rate without a sidecar")
        t0, rate = stamps[0], stamps[1] - stamps[0]
    return TimeSeries(t0, rate, np.array(values), seed)


def synthetic_base(n: int = 600, sampling_rate: float = 300.0, level: float = 200.0,
                   trend: float = 0.1, amplitude: float = 60.0, period: float = 48.0,
                   t0: float = 0.0) -> TimeSeries:
    """Deterministic sine-plus-trend base load used by demos and tests."""
    i = np.arange(n)
    values = level + trend * i + amplitude * np.sin(2 * np.pi * i / period)
    return TimeSeries(t0, sampling_rate, values)
