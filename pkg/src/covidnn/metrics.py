"""Confusion counts, accuracy/sensitivity/specificity and ROC points."""

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import DataError, InvalidArgumentError

NOT_APPLICABLE = "n/a"


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for key in ("tp", "tn", "fp", "fn"):
            if getattr(self, key) < 0:
                raise InvalidArgumentError(f"{key} must be non-negative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    @property
    def sensitivity(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)


def confusion_matrix(y_true, y_pred):
    """Tally a binary confusion matrix; label 1 is the COVID-19 (positive) class."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise InvalidArgumentError(f"label arrays must be 1-D and equal length, got {y_true.shape}, {y_pred.shape}")
    for arr in (y_true, y_pred):
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise InvalidArgumentError("labels must be 0 or 1")
    pos = y_true == 1
    hit = y_pred == 1
    return ConfusionMatrix(
        tp=int(np.sum(pos & hit)),
        tn=int(np.sum(~pos & ~hit)),
        fp=int(np.sum(~pos & hit)),
        fn=int(np.sum(pos & ~hit)),
    )


def predict_labels(covid_probability, threshold=0.5):
    """1 where the COVID-19 probability reaches the threshold (ties are positive)."""
    if not 0 < threshold < 1:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(covid_probability) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class MetricsReport:
    confusion: ConfusionMatrix
    threshold: float = 0.5
    model: str = ""
    modality: str = ""

    @property
    def n_images(self):
        return self.confusion.total

    @property
    def accuracy(self):
        return self.confusion.accuracy

    @property
    def sensitivity(self):
        return self.confusion.sensitivity

    @property
    def specificity(self):
        return self.confusion.specificity

    def to_dict(self):
        c = self.confusion

        def fmt(v):
            return NOT_APPLICABLE if v is None else v

        return {
            "model": self.model,
            "modality": self.modality,
            "n": c.total,
            "tp": c.tp,
            "tn": c.tn,
            "fp": c.fp,
            "fn": c.fn,
            "accuracy": fmt(self.accuracy),
            "sensitivity": fmt(self.sensitivity),
            "specificity": fmt(self.specificity),
            "threshold": self.threshold,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        confusion = ConfusionMatrix(data["tp"], data["tn"], data["fp"], data["fn"])
        return cls(confusion, data.get("threshold", 0.5), data.get("model", ""), data.get("modality", ""))


def report_from_predictions(y_true, y_pred, threshold=0.5, model="", modality=""):
    if len(y_true) == 0:
        raise DataError("cannot evaluate on an empty set")
    return MetricsReport(confusion_matrix(y_true, y_pred), threshold, model, modality)


def evaluate(network, images, labels, threshold=0.5, modality="", batch_size=10):
    """Score ``images`` with ``network`` and report the three screening metrics."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty set")
    probs = network.predict_proba(images, batch_size=batch_size)[:, 1]
    y_pred = predict_labels(probs, threshold)
    return report_from_predictions(labels, y_pred, threshold, network.spec.name, modality)


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


def roc_points(scores, labels):
    """ROC curve from COVID-19 scores, one point per distinct score.

    Thresholds run from ``+inf`` down through every distinct score to
    ``-inf`` and an image counts as positive when ``score >= threshold``.
    Coinciding points are merged, keeping the lowest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidArgumentError("scores and labels must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidArgumentError("labels must be 0 or 1")
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(y == 1)[ends]
    fps = np.cumsum(y == 0)[ends]
    points = [RocPoint(0.0, 0.0, math.inf)]
    for tp, fp, thr in zip(tps, fps, s[ends]):
        points.append(RocPoint(int(fp) / n_neg, int(tp) / n_pos, float(thr)))
    points.append(RocPoint(1.0, 1.0, -math.inf))
    merged = []
    for p in points:
        if merged and (merged[-1].fpr, merged[-1].tpr) == (p.fpr, p.tpr):
            merged[-1] = p
        else:
            merged.append(p)
    merged.sort(key=lambda p: (p.fpr, p.tpr))
    return merged


def auc(points):
    """Trapezoidal area under a list of ROC points."""
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return area


def write_roc_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for p in points:
            writer.writerow([repr(float(p.threshold)), repr(p.fpr), repr(p.tpr)])


def read_roc_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [RocPoint(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in csv.DictReader(fh)]


def aggregate_reports(reports):
    """Mean and population standard deviation of each metric over ``reports``.

    Runs whose metric is undefined are left out of that metric's statistics;
    a metric undefined in every run aggregates to ``"n/a"``.
    """
    out = {"runs": len(reports)}
    for key in ("accuracy", "sensitivity", "specificity"):
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if values:
            out[key] = {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
        else:
            out[key] = NOT_APPLICABLE
    return out

