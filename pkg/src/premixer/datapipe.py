"""Sensor-series ingestion, cleaning, aggregation, splitting, normalization
and window sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Iterator

import numpy as np

from premixer import pmxt
from premixer.errors import ConfigError, DataError, FormatError
from premixer.tensorcore import Rng

log = logging.getLogger(__name__)

CSV_HEADER = ["timestamp", "node_id", "value"]


@dataclass
class RawSeries:
    values: np.ndarray  # (T_total, N, C)
    interval_minutes: int = 15
    node_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise DataError(f"series must be (T, N, C) with T >= 1, got {self.values.shape}")
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.values.shape[1])]
        if len(self.node_ids) != self.values.shape[1]:
            raise DataError("node_ids length does not match node axis")

    @property
    def shape(self):
        return self.values.shape

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(self.values[start:stop], self.interval_minutes, list(self.node_ids))


@dataclass
class WindowSample:
    x_short: np.ndarray
    y: np.ndarray
    x_long: np.ndarray
    anchor_t: int


@dataclass(frozen=True)
class SplitSpec:
    train: Fraction = Fraction(6, 10)
    val: Fraction = Fraction(2, 10)
    test: Fraction = Fraction(2, 10)

    @classmethod
    def from_ratio(cls, train, val, test) -> "SplitSpec":
        parts = [Fraction(str(p)) for p in (train, val, test)]
        total = sum(parts)
        if total <= 0 or any(p < 0 for p in parts):
            raise ConfigError(f"invalid split ratio {train}:{val}:{test}")
        return cls(*(p / total for p in parts))

    def __post_init__(self):
        if self.train + self.val + self.test != 1:
            raise ConfigError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_series(raw: RawSeries, path, extra: dict | None = None) -> int:
    """Write PMXT payload plus a JSON sidecar with node ids and interval."""
    path = Path(path)
    crc = pmxt.write(path, raw.values)
    meta = {
        "shape": list(raw.values.shape),
        "interval_minutes": raw.interval_minutes,
        "node_ids": raw.node_ids,
        "crc32": crc,
    }
    meta.update(extra or {})
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return crc


def write_csv(raw: RawSeries, path, start: datetime = datetime(2019, 1, 1)):
    """Long-format CSV of channel 0, one row per (timestamp, node)."""
    from datetime import timedelta

    step = timedelta(minutes=raw.interval_minutes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for t in range(raw.values.shape[0]):
            ts = (start + t * step).isoformat()
            for n, nid in enumerate(raw.node_ids):
                v = raw.values[t, n, 0]
                w.writerow([ts, nid, "" if math.isnan(v) else repr(float(v))])


def load_series(path) -> RawSeries:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such data file: {path}")
    if path.suffix.lower() == ".csv":
        raw = _load_csv(path)
    else:
        arr = pmxt.read(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise FormatError(f"expected rank 2 or 3 tensor, got rank {arr.ndim}", offset=6)
        meta = {}
        if _sidecar(path).exists():
            meta = json.loads(_sidecar(path).read_text())
        raw = RawSeries(
            arr.astype(np.float64),
            int(meta.get("interval_minutes", 15)),
            list(meta.get("node_ids", [])),
        )
    n_nan = int(np.isnan(raw.values).sum())
    log.info("loaded %s: shape %s, %d missing readings", path, raw.values.shape, n_nan)
    return raw


def _load_csv(path: Path) -> RawSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"CSV header must be {','.join(CSV_HEADER)}, got {header}")
        per_node: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from exc
            val = float(row[2]) if row[2].strip() else math.nan
            rows = per_node.setdefault(row[1].strip(), [])
            if rows and ts <= rows[-1][0]:
                raise DataError(
                    f"{path}:{lineno}: timestamps for node {row[1]!r} not strictly increasing"
                )
            rows.append((ts, val))
    if not per_node:
        raise DataError(f"{path}: no data rows")
    stamps = sorted({ts for rows in per_node.values() for ts, _ in rows})
    index = {ts: i for i, ts in enumerate(stamps)}
    node_ids = list(per_node)
    values = np.full((len(stamps), len(node_ids), 1), np.nan)
    for n, nid in enumerate(node_ids):
        for ts, v in per_node[nid]:
            values[index[ts], n, 0] = v
    interval = 15
    if len(stamps) > 1:
        gaps = np.diff([s.timestamp() for s in stamps])
        interval = max(1, int(round(float(np.min(gaps)) / 60.0)))
    return RawSeries(values, interval, node_ids)


# ---------------------------------------------------------------------------
# cleaning / aggregation / splitting
# ---------------------------------------------------------------------------


def fill_missing(values: np.ndarray, max_interp: int = 3) -> np.ndarray:
    """Linear interpolation over interior gaps of at most ``max_interp``
    steps, carry-forward elsewhere (back-fill for leading gaps)."""
    out = np.array(values, dtype=np.float64, copy=True)
    t_total = out.shape[0]
    flat = out.reshape(t_total, -1)
    for col in range(flat.shape[1]):
        s = flat[:, col]
        bad = np.isnan(s)
        if not bad.any():
            continue
        if bad.all():
            raise DataError(f"series column {col} has no valid readings")
        t = 0
        while t < t_total:
            if not bad[t]:
                t += 1
                continue
            start = t
            while t < t_total and bad[t]:
                t += 1
            stop = t  # gap is [start, stop)
            if start == 0:
                s[start:stop] = s[stop]
            elif stop == t_total or stop - start > max_interp:
                s[start:stop] = s[start - 1]
            else:
                lo, hi = s[start - 1], s[stop]
                frac = np.arange(1, stop - start + 1) / (stop - start + 1)
                s[start:stop] = lo + (hi - lo) * frac
    return out


def aggregate(raw: RawSeries, factor: int) -> RawSeries:
    """Mean over consecutive groups of ``factor`` steps; NaNs are skipped
    within a group and an all-NaN group stays NaN."""
    if factor < 1:
        raise ConfigError(f"aggregation factor must be >= 1, got {factor}")
    t_total = raw.values.shape[0]
    keep = (t_total // factor) * factor
    if keep != t_total:
        warnings.warn(
            f"aggregate: dropping {t_total - keep} trailing steps not divisible by {factor}",
            stacklevel=2,
        )
    if keep == 0:
        raise DataError(f"series of length {t_total} shorter than aggregation factor {factor}")
    grouped = raw.values[:keep].reshape(keep // factor, factor, *raw.values.shape[1:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        agg = np.nanmean(grouped, axis=1)
    return RawSeries(agg, raw.interval_minutes * factor, list(raw.node_ids))


def split_bounds(t_total: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    """Return ``(train_end, val_end, t_total)``."""
    if t_total < 10:
        raise ConfigError(f"need at least 10 timesteps to split, got {t_total}")
    b1 = math.floor(spec.train * t_total)
    b2 = math.floor((spec.train + spec.val) * t_total)
    if b1 <= 0 or b2 <= b1 or t_total <= b2:
        raise ConfigError(f"split {spec} of {t_total} steps leaves an empty slice")
    return b1, b2, t_total


def split_chronological(raw: RawSeries, spec: SplitSpec = SplitSpec()):
    b1, b2, t_total = split_bounds(raw.values.shape[0], spec)
    return raw.slice(0, b1), raw.slice(b1, b2), raw.slice(b2, t_total)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(train) -> Normalizer:
    """Per-channel z-score over all timesteps and nodes, NaNs excluded."""
    values = train.values if isinstance(train, RawSeries) else np.asarray(train)
    if values.size == 0:
        raise ConfigError("cannot fit a normalizer on an empty slice")
    flat = values.reshape(-1, values.shape[-1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(flat, axis=0)
        std = np.nanstd(flat, axis=0)
    for c in range(flat.shape[1]):
        if not np.isfinite(std[c]) or std[c] <= 0:
            raise ConfigError(f"channel {c} has zero variance on the training slice")
    return Normalizer(mean, std)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def window_anchors(length, T_long, horizon, stride=1, lo=None, hi=None) -> np.ndarray:
    """Anchors ``t`` with ``x_long = [t - T_long, t)`` and ``y = [t, t + horizon)``.

    Anchors run over ``[max(lo, T_long), min(hi, length - horizon)]``; ``lo``
    and ``hi`` default to the full series.
    """
    first = T_long if lo is None else max(lo, T_long)
    last = length - horizon if hi is None else min(hi, length - horizon)
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, stride, dtype=np.int64)


def split_anchors(length, bounds, split, T_long, horizon, stride=1) -> np.ndarray:
    """Anchors whose forecast target lies inside ``split`` (0, 1 or 2).

    The long history may reach back into earlier splits; targets never cross
    a boundary.
    """
    edges = (0,) + tuple(bounds)
    start, end = edges[split], edges[split + 1]
    return window_anchors(length, T_long, horizon, stride, lo=start, hi=end - horizon)


def gather_windows(values, anchors, T, horizon, T_long):
    """Batch-gather ``(x_short, y, x_long)`` arrays for the given anchors."""
    anchors = np.asarray(anchors, dtype=np.int64)
    short_idx = anchors[:, None] + np.arange(-T, 0)
    y_idx = anchors[:, None] + np.arange(horizon)
    x_short = values[short_idx]
    y = values[y_idx]
    if T_long:
        long_idx = anchors[:, None] + np.arange(-T_long, 0)
        x_long = values[long_idx]
    else:
        x_long = None
    return x_short, y, x_long


def sample_windows(
    series, T=12, horizon=12, T_long=672, stride=1, shuffle_seed=None, lo=None, hi=None
) -> Iterator[WindowSample]:
    """Iterate windows in ascending anchor order, or in a seeded permutation
    when ``shuffle_seed`` is given."""
    values = series.values if isinstance(series, RawSeries) else np.asarray(series)
    if T > T_long:
        raise ConfigError(f"short window T={T} exceeds long history T_long={T_long}")
    anchors = window_anchors(values.shape[0], T_long, horizon, stride, lo, hi)
    if anchors.size == 0:
        warnings.warn(
            f"series of length {values.shape[0]} too short for T_long={T_long} + horizon={horizon}",
            stacklevel=2,
        )
        return iter(())
    if shuffle_seed is not None:
        anchors = anchors[Rng(shuffle_seed).permutation(anchors.size)]

    def _gen():
        for t in anchors:
            t = int(t)
            yield WindowSample(
                x_short=values[t - T : t],
                y=values[t : t + horizon],
                x_long=values[t - T_long : t],
                anchor_t=t,
            )

    return _gen()


def add_time_features(values: np.ndarray, steps_per_day: int = 96, offset: int = 0) -> np.ndarray:
    """Append time-of-day and day-of-week channels in [0, 1)."""
    t = np.arange(values.shape[0]) + offset
    tod = (t % steps_per_day) / steps_per_day
    dow = ((t // steps_per_day) % 7) / 7.0
    n = values.shape[1]
    extra = np.stack([np.repeat(tod[:, None], n, 1), np.repeat(dow[:, None], n, 1)], axis=-1)
    return np.concatenate([values, extra], axis=-1)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def generate_synthetic(nodes, days, seed, steps_per_day=96, noise=5.0) -> RawSeries:
    """Daily plus weekly sinusoids per node with weekend damping and Gaussian noise.

    Flow for node n at step t::

        base_n + w(t) * a_n * sin(2 pi t / spd + phi_n) + b_n * sin(2 pi t / (7 spd) + psi_n) + noise

    where ``w(t)`` is 1 on weekdays and 0.55 on the two weekend days.
    """
    if nodes < 1 or days < 1:
        raise ConfigError(f"nodes and days must be >= 1, got nodes={nodes}, days={days}")
    rng = Rng(seed)
    base = rng.uniform(100.0, 400.0, nodes)
    daily_amp = base * rng.uniform(0.3, 0.6, nodes)
    weekly_amp = base * rng.uniform(0.05, 0.15, nodes)
    phi = rng.uniform(0.0, 2.0 * np.pi, nodes)
    psi = rng.uniform(0.0, 2.0 * np.pi, nodes)
    t = np.arange(days * steps_per_day, dtype=np.float64)[:, None]
    weekend = ((np.arange(days * steps_per_day) // steps_per_day) % 7) >= 5
    w = np.where(weekend, 0.55, 1.0)[:, None]
    flow = (
        base
        + w * daily_amp * np.sin(2.0 * np.pi * t / steps_per_day + phi)
        + weekly_amp * np.sin(2.0 * np.pi * t / (7 * steps_per_day) + psi)
    )
    if noise > 0:
        flow = flow + noise * rng.normal(size=flow.shape)
    flow = np.maximum(flow, 0.0)
    return RawSeries(
        flow[:, :, None],
        interval_minutes=24 * 60 // steps_per_day,
        node_ids=[f"S{n:04d}" for n in range(nodes)],
    )
