"""Occurrence (F1) and count (MAE/MAPE) metrics plus the historical-average floor."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

OCCURRENCE_THRESHOLD = 0.5
TEST_HORIZON = 90


def _confusion(pred_bin, true_bin):
    """tp, fp, fn per category; the category axis is last."""
    p = np.asarray(pred_bin).astype(bool)
    t = np.asarray(true_bin).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    p = p.reshape(-1, p.shape[-1])
    t = t.reshape(-1, t.shape[-1])
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    return tp, fp, fn


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


def f1_per_category(pred_bin, true_bin) -> np.ndarray:
    """F1 of the positive class for each category (last axis); 0 when P+R = 0."""
    return _f1(*_confusion(pred_bin, true_bin))


def micro_macro_f1(pred_bin, true_bin) -> tuple[float, float]:
    tp, fp, fn = _confusion(pred_bin, true_bin)
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    macro = float(_f1(tp, fp, fn).mean())
    return micro, macro


def mae_mape(pred_counts, true_counts) -> tuple[float, float | None]:
    """MAE over all cells; MAPE over cells with positive truth (None if there are none)."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    true = np.asarray(true_counts, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth shape {true.shape}")
    err = np.abs(pred - true)
    mae = float(err.mean())
    pos = true > 0
    mape = float((err[pos] / true[pos]).mean()) if pos.any() else None
    return mae, mape


@dataclass
class MetricsReport:
    f1: list[float] | None
    micro_f1: float | None
    macro_f1: float | None
    mae: float | None
    mape: float | None
    n_cells: int
    n_windows: int
    categories: list[str] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write_category_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "f1"])
            names = self.categories or [str(i) for i in range(len(self.f1 or []))]
            for name, val in zip(names, self.f1 or []):
                w.writerow([name, "%.17g" % val])


def classification_report(pred_prob, true_counts, categories=None) -> MetricsReport:
    """Threshold probabilities at 0.5 and score occurrences. Arrays are (windows, R, C)."""
    pred_bin = np.asarray(pred_prob) >= OCCURRENCE_THRESHOLD
    true_bin = np.asarray(true_counts) > 0
    micro, macro = micro_macro_f1(pred_bin, true_bin)
    return MetricsReport(f1_per_category(pred_bin, true_bin).tolist(), micro, macro, None, None,
                         int(true_bin.size), int(true_bin.shape[0]), categories)


def regression_report(pred_counts, true_counts, categories=None) -> MetricsReport:
    mae, mape = mae_mape(pred_counts, true_counts)
    true = np.asarray(true_counts)
    return MetricsReport(None, None, None, mae, mape, int(true.size), int(true.shape[0]), categories)


def horizon_targets(test_targets: np.ndarray, horizon: int = TEST_HORIZON) -> np.ndarray:
    """The first ``horizon`` consecutive test slots, or all when fewer exist."""
    return np.asarray(test_targets)[:horizon]


class HistoricalAverage:
    """Per (region, category) mean count over the training period."""

    def __init__(self, counts: np.ndarray, train_targets: np.ndarray):
        train_targets = np.asarray(train_targets)
        if train_targets.size == 0:
            raise ValueError("historical average needs training data")
        span = np.asarray(counts, dtype=np.float64)[:, : int(train_targets.max()) + 1, :]
        self.mean = span.mean(axis=1)

    def predict_counts(self, n_windows: int = 1) -> np.ndarray:
        return np.broadcast_to(self.mean, (n_windows,) + self.mean.shape).copy()

    def predict_occurrence(self, n_windows: int = 1) -> np.ndarray:
        return self.predict_counts(n_windows) > OCCURRENCE_THRESHOLD


def historical_average_baseline(counts, train_targets) -> HistoricalAverage:
    return HistoricalAverage(counts, train_targets)
