"""Masked MAE / RMSE / MAPE and the horizon-structured report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from premixer.errors import DataError, ShapeError

REPORT_HORIZONS = (3, 6, 12)
CSV_COLUMNS = ("horizon", "mae", "rmse", "mape_percent")


def _valid(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    valid = np.isfinite(truth)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return pred, truth, valid


def _need(count, what):
    if count == 0:
        raise DataError(f"{what} undefined: no valid entries")


def mae(pred, truth, mask=None) -> float:
    pred, truth, valid = _valid(pred, truth, mask)
    _need(valid.sum(), "MAE")
    return float(np.abs(pred - truth)[valid].mean())


def rmse(pred, truth, mask=None) -> float:
    pred, truth, valid = _valid(pred, truth, mask)
    _need(valid.sum(), "RMSE")
    return float(np.sqrt(((pred - truth) ** 2)[valid].mean()))


def mape(pred, truth, mask=None, min_truth=1.0) -> float:
    """Percent; entries with ``|truth| < min_truth`` are left out."""
    pred, truth, valid = _valid(pred, truth, mask)
    valid &= np.abs(truth) >= min_truth
    _need(valid.sum(), "MAPE")
    return float(100.0 * (np.abs(pred - truth)[valid] / np.abs(truth[valid])).mean())


def default_mask(truth, null_value=0.0):
    """Zero readings are treated as missing."""
    return np.isfinite(truth) & (truth != null_value)


@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float


@dataclass
class MetricsReport:
    rows: dict = field(default_factory=dict)  # label -> HorizonMetrics
    sample_count: int = 0
    masked_count: int = 0

    def __getitem__(self, label):
        return self.rows[label]

    @property
    def average(self) -> HorizonMetrics:
        return self.rows["average"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for label, m in self.rows.items():
            w.writerow([label, f"{m.mae:.6f}", f"{m.rmse:.6f}", f"{m.mape:.4f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "horizons": {k: vars(v) for k, v in self.rows.items()},
            "sample_count": self.sample_count,
            "masked_count": self.masked_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, stem):
        """Write ``<stem>.csv`` and ``<stem>.json``."""
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        rows = {k: HorizonMetrics(**v) for k, v in d["horizons"].items()}
        return cls(rows, d.get("sample_count", 0), d.get("masked_count", 0))


def horizon_report(preds, truths, mask=None, min_truth=1.0, horizons=REPORT_HORIZONS,
                   expected_len=12) -> MetricsReport:
    """``preds``/``truths`` are (S, horizon, N, C) in raw units. Rows for the
    1-based horizons requested plus ``average`` pooled over every step."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape or preds.ndim != 4:
        raise ShapeError(f"expected matching (S, horizon, N, C) arrays, got {preds.shape} / {truths.shape}")
    if expected_len is not None and preds.shape[1] != expected_len:
        raise ShapeError(f"horizon axis has length {preds.shape[1]}, expected {expected_len}")
    if mask is None:
        mask = default_mask(truths)
    rows = {}
    for h in horizons:
        sl = np.s_[:, h - 1]
        rows[str(h)] = HorizonMetrics(
            mae(preds[sl], truths[sl], mask[sl]),
            rmse(preds[sl], truths[sl], mask[sl]),
            mape(preds[sl], truths[sl], mask[sl], min_truth),
        )
    rows["average"] = HorizonMetrics(
        mae(preds, truths, mask), rmse(preds, truths, mask), mape(preds, truths, mask, min_truth)
    )
    return MetricsReport(rows, int(preds.shape[0]), int((~np.asarray(mask, bool)).sum()))
