"""Accuracy, mAP@3 and lwlrap, with per-class breakdowns.

Ties: ``lwlrap`` counts every label scoring >= the label being ranked (so a
label always ranks itself and tied competitors count against it).  Top-1 and
top-3 orderings break ties by ascending class index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyLabelSet, LabelArity


def _as_matrix(scores, y) -> tuple[np.ndarray, np.ndarray]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y))
    if scores.shape != y.shape:
        raise ValueError(f"score shape {scores.shape} != label shape {y.shape}")
    return scores, (y > 0)


def labels_to_indices(labels) -> np.ndarray:
    """Class index per clip from an index vector or a one-hot matrix."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return labels.astype(np.int64)
    counts = (labels > 0).sum(axis=1)
    if np.any(counts != 1):
        raise LabelArity("accuracy / mAP@3 need exactly one positive label per clip")
    return np.argmax(labels > 0, axis=1)


def top1(scores) -> np.ndarray:
    return np.argmax(np.asarray(scores), axis=1)  # first max wins


def ranking(scores) -> np.ndarray:
    """Class indices per row, best first; ties by ascending class index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    if predictions.ndim == 2:
        predictions = top1(predictions)
    truth = labels_to_indices(labels)
    if predictions.shape != truth.shape:
        raise ValueError("prediction / label count mismatch")
    return float(np.mean(predictions == truth))


def average_precision_at_k(scores, y, k: int = 3) -> np.ndarray:
    """Per-clip AP@k: precision summed at ranks holding a true label, over min(#true, k)."""
    scores, y = _as_matrix(scores, y)
    order = ranking(scores)[:, :k]
    hits = np.take_along_axis(y, order, axis=1).astype(np.float64)
    prec = np.cumsum(hits, axis=1) / np.arange(1, hits.shape[1] + 1)
    denom = np.minimum(y.sum(axis=1), k)
    if np.any(denom == 0):
        raise EmptyLabelSet("clip without a positive label")
    return (prec * hits).sum(axis=1) / denom


def map_at_3(scores, y) -> float:
    return float(np.mean(average_precision_at_k(scores, y, 3)))


def label_precisions(scores, y) -> np.ndarray:
    """|L_ij| / rank_ij for every positive (i, j); zero elsewhere."""
    scores, y = _as_matrix(scores, y)
    if np.any(y.sum(axis=1) == 0):
        bad = int(np.flatnonzero(y.sum(axis=1) == 0)[0])
        raise EmptyLabelSet(f"clip row {bad} has no positive label")
    # ge[i, j, k] = f_ik >= f_ij
    ge = scores[:, None, :] >= scores[:, :, None]
    rank = ge.sum(axis=2)
    hits = (ge & y[:, None, :]).sum(axis=2)
    return np.where(y, hits / rank, 0.0)


def lwlrap(scores, y) -> tuple[float, np.ndarray, np.ndarray]:
    """Label-weighted LRAP; returns ``(overall, per_class, weights)``.

    ``overall == sum(weights * per_class)``; classes without positives get
    score 0 and weight 0.
    """
    prec = label_precisions(scores, y)
    _, yb = _as_matrix(scores, y)
    counts = yb.sum(axis=0).astype(np.float64)
    per_class = np.divide(prec.sum(axis=0), counts, out=np.zeros_like(counts), where=counts > 0)
    weights = counts / counts.sum()
    overall = float(prec.sum() / counts.sum())
    return overall, per_class, weights


@dataclass
class EvalReport:
    metric: str
    overall: dict[str, float]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    U: int = 0

    def sorted_classes(self, descending: bool = True) -> list[tuple[str, dict[str, float]]]:
        return sorted(self.per_class.items(), key=lambda kv: kv[1]["score"], reverse=descending)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "overall": self.overall, "U": self.U, "per_class": self.per_class}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path: str | Path) -> None:
        """Columns: ``class,score,weight,count``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "score", "weight", "count"])
            for name, row in self.per_class.items():
                w.writerow([name, repr(row["score"]), repr(row["weight"]), int(row["count"])])


def per_class_report(scores, y, metric: str = "lwlrap",
                     class_names: Sequence[str] | None = None) -> EvalReport:
    """Per-class values whose weighted sum reproduces the overall metric."""
    scores, yb = _as_matrix(scores, y)
    n, J = scores.shape
    names = list(class_names) if class_names is not None else [str(j) for j in range(J)]
    counts = yb.sum(axis=0)
    if metric == "lwlrap":
        overall, per, weights = lwlrap(scores, yb)
    elif metric in ("map3", "accuracy"):
        truth = labels_to_indices(yb)
        vals = average_precision_at_k(scores, yb, 3) if metric == "map3" else (top1(scores) == truth).astype(float)
        overall = float(vals.mean())
        per = np.array([vals[truth == j].mean() if counts[j] else 0.0 for j in range(J)])
        weights = counts / n
    else:
        raise ValueError(f"unknown metric {metric!r}")
    per_class = {
        names[j]: {"score": float(per[j]), "weight": float(weights[j]), "count": int(counts[j])}
        for j in range(J)
    }
    return EvalReport(metric, {metric: float(overall)}, per_class, U=n)
