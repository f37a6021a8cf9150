"""CSV ingestion, chronological splits, train-split scaling, window batching.

Datasets are immutable channel-major f64 matrices. Splits are chronological
and non-overlapping; the val/test ranges are extended backward by T-1 steps
so their early targets have full input windows without borrowing future
data. Normalization stats always come from the train range alone, and since
metrics are computed in normalized space, everything downstream of load_csv
works in that space.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Dataset:
    name: str
    values: np.ndarray  # f64[D, N]
    timestamps: tuple | None = None  # ISO-8601 strings, informational

    @property
    def D(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]


def _parse_cell(text, line_no, col_name, path):
    try:
        v = float(text)
    except ValueError:
        raise DataError(
            f"{path}: unparseable cell {text!r} at row {line_no}, column {col_name!r}"
        ) from None
    if not math.isfinite(v):
        raise DataError(
            f"{path}: non-finite value {text!r} at row {line_no}, column {col_name!r}"
        )
    return v


def load_csv(path, value_columns=None, name=None):
    """Read a header + rows CSV into a Dataset.

    The first column is treated as a timestamp when its first data cell is
    not numeric. value_columns optionally restricts (and orders) the value
    columns by header name. Row numbers in errors are 1-based file lines
    (the header is line 1).
    """
    path = str(path)
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read dataset: {e}") from None
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: no data rows")

    has_ts = False
    try:
        float(rows[0][0])
    except ValueError:
        has_ts = True
    first_value_col = 1 if has_ts else 0
    names = header[first_value_col:]

    if value_columns is not None:
        missing = [c for c in value_columns if c not in names]
        if missing:
            raise DataError(f"{path}: missing columns {missing} (header has {names})")
        picks = [first_value_col + names.index(c) for c in value_columns]
        names = list(value_columns)
    else:
        picks = list(range(first_value_col, len(header)))
    if not picks:
        raise DataError(f"{path}: no value columns")

    out = np.empty((len(picks), len(rows)))
    timestamps = [] if has_ts else None
    for i, row in enumerate(rows):
        line_no = i + 2  # 1-based, after the header line
        if len(row) != len(header):
            raise DataError(
                f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}"
            )
        if has_ts:
            timestamps.append(row[0])
        for j, col in enumerate(picks):
            out[j, i] = _parse_cell(row[col], line_no, header[col], path)

    return Dataset(
        name=name or path,
        values=out,
        timestamps=tuple(timestamps) if timestamps else None,
    )


# --- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    mode: str  # ratio | ett_months
    train: float = 0.65
    val: float = 0.15
    test: float = 0.2
    months: tuple = (12, 4, 4)

    def __post_init__(self):
        if self.mode not in ("ratio", "ett_months"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if self.mode == "ratio":
            if min(self.train, self.val, self.test) <= 0:
                raise ConfigError("split ratios must be positive")
            if abs(self.train + self.val + self.test - 1.0) > 1e-9:
                raise ConfigError(
                    f"split ratios must sum to 1, got {self.train}/{self.val}/{self.test}"
                )

    @classmethod
    def ratio(cls, train=0.65, val=0.15, test=0.2):
        return cls(mode="ratio", train=train, val=val, test=test)

    @classmethod
    def ett_months(cls):
        return cls(mode="ett_months")


@dataclass(frozen=True)
class SplitRanges:
    train: tuple  # (start, stop) half-open index ranges into the series
    val: tuple
    test: tuple


def samples_per_hour(ds):
    """Infer sampling rate from the first two timestamps."""
    if ds.timestamps is None or len(ds.timestamps) < 2:
        raise DataError(f"{ds.name}: month-based split needs timestamps")
    try:
        t0 = datetime.fromisoformat(ds.timestamps[0])
        t1 = datetime.fromisoformat(ds.timestamps[1])
    except ValueError as e:
        raise DataError(f"{ds.name}: cannot parse timestamps: {e}") from None
    step = (t1 - t0).total_seconds()
    if step <= 0 or 3600.0 % step:
        raise DataError(f"{ds.name}: timestamp step {step}s does not divide an hour")
    return int(3600.0 // step)


def split(ds, spec, T, L):
    """Chronological (train, val, test) ranges with T-1 back-extension."""
    N = ds.N
    if spec.mode == "ratio":
        n_train = int(N * spec.train + 1e-9)
        n_val = int(N * spec.val + 1e-9)
        n_test = N - n_train - n_val
    else:
        f = samples_per_hour(ds)
        month = 30 * 24 * f
        n_train, n_val, n_test = (m * month for m in spec.months)
        if N < n_train + n_val + n_test:
            raise DataError(
                f"{ds.name}: {N} steps < {n_train + n_val + n_test} needed for "
                f"{spec.months} months at {f}/hour"
            )
    ranges = SplitRanges(
        train=(0, n_train),
        val=(n_train - (T - 1), n_train + n_val),
        test=(n_train + n_val - (T - 1), n_train + n_val + n_test),
    )
    for part, (a, b) in zip(("train", "val", "test"), (ranges.train, ranges.val, ranges.test)):
        if a < 0 or b - a < T + L:
            raise DataError(
                f"{ds.name}: {part} range [{a}, {b}) too short for T={T}, L={L}"
            )
    return ranges


# --- normalization ----------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # f64[D]
    std: np.ndarray  # f64[D], population


def zscore_fit(ds, train_range):
    a, b = train_range
    block = ds.values[:, a:b]
    mean = block.mean(axis=1)
    std = block.std(axis=1)
    flat = np.nonzero(std == 0.0)[0]
    if flat.size:
        raise DataError(f"{ds.name}: constant channel {flat[0]} in train split")
    return NormalizationStats(mean=mean, std=std)


def zscore_apply(ds, stats):
    values = (ds.values - stats.mean[:, None]) / stats.std[:, None]
    return Dataset(name=ds.name, values=values, timestamps=ds.timestamps)


def zscore_invert(values, stats):
    return values * stats.std[:, None] + stats.mean[:, None]


# --- window batching ----------------------------------------------------------------


@dataclass(frozen=True)
class WindowBatch:
    X: np.ndarray  # f64[B, D, T]
    Y: np.ndarray  # f64[B, D, L]
    starts: np.ndarray  # source index of each window's first input step


def window_starts(segment, T, L):
    a, b = segment
    count = (b - a) - T - L + 1
    if count < 1:
        raise DataError(f"range [{a}, {b}) too short for T={T}, L={L}")
    return np.arange(a, a + count)


def iterate_batches(values, segment, T, L, batch_size, shuffle_seed=None):
    """Yield WindowBatch covering every window start once.

    shuffle_seed None keeps chronological order (evaluation); otherwise the
    start order is a seeded permutation. The last partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    starts = window_starts(segment, T, L)
    if shuffle_seed is not None:
        starts = np.random.default_rng(shuffle_seed).permutation(starts)
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        X = np.stack([values[:, s : s + T] for s in chunk])
        Y = np.stack([values[:, s + T : s + T + L] for s in chunk])
        yield WindowBatch(X=X, Y=Y, starts=chunk)


class SlidingWindows:
    """Window source over a normalized series: the interface train() consumes."""

    def __init__(self, ds, ranges, T, L, batch_size):
        self.values = ds.values
        self.ranges = ranges
        self.T = T
        self.L = L
        self.batch_size = batch_size
        self.D = ds.D

    def train_batches(self, shuffle_seed):
        return iterate_batches(
            self.values, self.ranges.train, self.T, self.L, self.batch_size, shuffle_seed
        )

    def val_batches(self):
        return iterate_batches(self.values, self.ranges.val, self.T, self.L, self.batch_size)

    def test_batches(self):
        return iterate_batches(self.values, self.ranges.test, self.T, self.L, self.batch_size)


# --- normalized dataset cache ---------------------------------------------------------


def save_cache(path, ds, stats):
    """Binary cache of a normalized dataset plus its train-split stats.

    Only the two leading timestamps are kept: they are what month-based
    splitting needs to re-infer the sampling rate.
    """
    header = {"name": ds.name, "kind": "dataset-cache"}
    if ds.timestamps is not None and len(ds.timestamps) >= 2:
        header["ts0"] = ds.timestamps[0]
        header["ts1"] = ds.timestamps[1]
    ad.save_tensors(
        path,
        [("values", ds.values), ("mean", stats.mean), ("std", stats.std)],
        header=header,
    )


def load_cache(path):
    header, records = ad.load_tensors(path)
    if header.get("kind") != "dataset-cache":
        raise DataError(f"{path}: not a dataset cache")
    named = dict(records)
    if not {"values", "mean", "std"} <= set(named):
        raise DataError(f"{path}: cache is missing tensors {sorted({'values', 'mean', 'std'} - set(named))}")
    ts = None
    if "ts0" in header:
        ts = (header["ts0"], header["ts1"])
    ds = Dataset(name=header.get("name", str(path)), values=named["values"], timestamps=ts)
    stats = NormalizationStats(mean=named["mean"], std=named["std"])
    return ds, stats
