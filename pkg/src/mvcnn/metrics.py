"""Confusion matrix, per-class rates, precision/recall/F1, ROC/AUC and reports.

The confusion matrix is oriented with rows = predicted class and columns =
actual class. Zero denominators give 0 (and raise a ``degenerate`` flag)
rather than NaN.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, ImageSource
from .errors import DimensionError, LabelError
from .model import count_parameters, forward
from .views import ViewParams


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[predicted, actual]
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def write_csv(self, path: "str | Path") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["predicted\\actual"] + list(self.class_names))
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name] + [int(v) for v in row])


def confusion_matrix(
    predicted: Sequence[int], actual: Sequence[int], k: int, class_names: Optional[list[str]] = None
) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape:
        raise DimensionError(f"{len(predicted)} predictions but {len(actual)} labels")
    for what, arr in (("predicted", predicted), ("actual", actual)):
        bad = np.flatnonzero((arr < 0) | (arr >= k))
        if bad.size:
            raise LabelError(f"{what} label {arr[bad[0]]} at position {bad[0]} is outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (predicted, actual), 1)
    names = class_names if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(counts, list(names))


@dataclass
class ClassRates:
    tp: int
    fp: int
    tn: int
    fn: int
    tp_rate: float
    fp_rate: float
    degenerate: bool


def per_class_rates(cm: ConfusionMatrix, k: int) -> ClassRates:
    c = cm.counts
    tp = int(c[k, k])
    fp = int(c[k, :].sum()) - tp
    fn = int(c[:, k].sum()) - tp
    tn = cm.total - tp - fp - fn
    degenerate = (fn + tp) == 0 or (tn + fp) == 0
    tpr = tp / (fn + tp) if fn + tp else 0.0
    fpr = fp / (tn + fp) if tn + fp else 0.0
    return ClassRates(tp, fp, tn, fn, tpr, fpr, degenerate)


def precision_recall_f1(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (fp + tp) if fp + tp else 0.0
    r = tp / (fn + tp) if fn + tp else 0.0
    return p, r, f1_from(p, r)


def f1_from(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass
class RocCurve:
    fp_rate: np.ndarray
    tp_rate: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing predicted positive)
    auc: float
    degenerate: bool


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """One-vs-rest ROC by descending unique thresholds; AUC by trapezoids.

    Tied scores form a single step, which makes the area equal to the
    pair-counting estimate with ties credited 1/2. Without both classes the
    curve is degenerate and the AUC is reported as 1.0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"{len(scores)} scores but {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(lab)[ends]
    fps = (ends + 1) - tps
    thresholds = np.r_[np.inf, s[ends]]
    if n_pos == 0 or n_neg == 0:
        tpr = np.r_[0.0, tps / n_pos] if n_pos else np.r_[0.0, np.ones(len(ends))]
        fpr = np.r_[0.0, fps / n_neg] if n_neg else np.r_[0.0, np.ones(len(ends))]
        return RocCurve(fpr, tpr, thresholds, 1.0, True)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc, False)


def write_roc_csv(curve: RocCurve, path: "str | Path") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fp_rate", "tp_rate", "threshold"])
        for f, t, th in zip(curve.fp_rate, curve.tp_rate, curve.thresholds):
            w.writerow([f"{f:.6f}", f"{t:.6f}", "inf" if np.isinf(th) else f"{th:.6f}"])


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    auc: float
    support: int
    degenerate: bool = False


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class: list[ClassMetrics]
    overall_accuracy: float
    macro_f1: float
    params_trainable: int
    params_total: int
    mean_epoch_seconds: Optional[float] = None
    roc: dict[str, RocCurve] = field(default_factory=dict)

    def write(self, out_dir: "str | Path") -> Path:
        """Write confusion.csv, per_class.csv, summary.csv and roc_<class>.csv."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.confusion.write_csv(out / "confusion.csv")
        with open(out / "per_class.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "precision", "recall", "f1", "auc", "support", "degenerate"])
            for m in self.per_class:
                w.writerow(
                    [m.name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", f"{m.auc:.6f}",
                     m.support, int(m.degenerate)]
                )
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["accuracy", "macro_f1", "params_trainable", "params_total", "mean_epoch_seconds"])
            secs = "" if self.mean_epoch_seconds is None else f"{self.mean_epoch_seconds:.6f}"
            w.writerow(
                [f"{self.overall_accuracy:.6f}", f"{self.macro_f1:.6f}", self.params_trainable, self.params_total, secs]
            )
        for name, curve in self.roc.items():
            write_roc_csv(curve, out / f"roc_{safe_filename(name)}.csv")
        return out


def safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._+-]+", "_", name)


def report_from_scores(
    probabilities: np.ndarray,
    actual: Sequence[int],
    class_names: list[str],
    params: tuple[int, int] = (0, 0),
    mean_epoch_seconds: Optional[float] = None,
) -> EvalReport:
    """Assemble an EvalReport from (n, K) class probabilities and true labels."""
    probabilities = np.asarray(probabilities)
    actual = np.asarray(actual, dtype=np.int64)
    k = len(class_names)
    if probabilities.shape != (len(actual), k):
        raise DimensionError(f"probabilities {probabilities.shape} do not match ({len(actual)}, {k})")
    cm = confusion_matrix(probabilities.argmax(axis=1), actual, k, class_names)
    per_class = []
    roc = {}
    for c, name in enumerate(class_names):
        rates = per_class_rates(cm, c)
        p, r, f1 = precision_recall_f1(rates.tp, rates.fp, rates.fn)
        curve = roc_auc(probabilities[:, c], actual == c)
        roc[name] = curve
        per_class.append(
            ClassMetrics(name, p, r, f1, curve.auc, int((actual == c).sum()), rates.degenerate or curve.degenerate)
        )
    macro_f1 = float(np.mean([m.f1 for m in per_class]))
    return EvalReport(cm, per_class, cm.accuracy, macro_f1, params[0], params[1], mean_epoch_seconds, roc)


def evaluate(
    model,
    dataset,
    combo=None,
    view_params=None,
    size=None,
    history=None,
    batch_size: int = 32,
) -> EvalReport:
    """Infer-mode evaluation of ``model`` over a Dataset or in-memory source."""
    if isinstance(dataset, Dataset):
        source = ImageSource(
            dataset,
            combo if combo is not None else model.config.view_combination,
            view_params if view_params is not None else ViewParams(),
            size,
        )
        names = dataset.classes
    else:
        source = dataset
        if isinstance(dataset, ImageSource):
            names = dataset.dataset.classes
        else:
            names = [str(i) for i in range(dataset.class_count)]
    if model.config.class_count != source.class_count:
        raise DimensionError(
            f"model has {model.config.class_count} classes but the dataset has {source.class_count}"
        )
    probs, labels = [], []
    for x, y in source.batches(batch_size, shuffle=False):
        p, _ = forward(model, x, "infer")
        probs.append(p)
        labels.append(y.argmax(axis=1))
    secs = history.mean_epoch_seconds if history is not None and len(history) else None
    return report_from_scores(np.concatenate(probs), np.concatenate(labels), list(names), count_parameters(model), secs)
