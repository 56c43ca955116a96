"""Concept- and label-level evaluation.

Concept collapse is the fraction of ground-truth classes that the model
never predicts:

    Cls(C) = 1 - |{c : some truth and some prediction is c}| / |{c : some truth is c}|

Only predicted classes that also occur in the truth are counted, which keeps
the value in [0, 1] and makes it zero exactly when predictions cover every
true class.

Macro F1 averages per-class F1 over the classes present in the ground truth.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

METRIC_NAMES = ("acc_c", "f1_c", "acc_y", "f1_y", "cls_c")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction
    classes: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricReport:
    acc_c: float
    f1_c: float
    acc_y: float
    f1_y: float
    cls_c: float
    precision_c: tuple[float, ...] = ()
    recall_c: tuple[float, ...] = ()

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision_c"] = list(self.precision_c)
        d["recall_c"] = list(self.recall_c)
        return d


def confusion_matrix(truth, pred, n_classes: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"{truth.shape[0]} truths but {pred.shape[0]} predictions")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts, tuple(range(n_classes)))


def per_class_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm.counts).astype(np.float64)
    pred_tot = cm.counts.sum(axis=0)
    true_tot = cm.counts.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def macro_f1(cm: ConfusionMatrix) -> float:
    present = cm.counts.sum(axis=1) > 0
    if not present.any():
        raise ValueError("empty confusion matrix")
    return float(per_class_scores(cm)[2][present].mean())


def concept_collapse(cm: ConfusionMatrix) -> float:
    present = cm.counts.sum(axis=1) > 0
    if not present.any():
        raise ValueError("empty confusion matrix")
    predicted = cm.counts.sum(axis=0) > 0
    return float(1.0 - (predicted & present).sum() / present.sum())


def sum_beta(concepts: np.ndarray) -> np.ndarray:
    return np.asarray(concepts).sum(axis=-1)


def evaluate(pred_concepts, true_concepts, true_labels, n_classes: int = 10,
             beta: Callable[[np.ndarray], np.ndarray] = sum_beta,
             n_labels: int = 19) -> tuple[MetricReport, ConfusionMatrix]:
    """Score predicted concept tuples against the ground truth.

    Final labels are derived from the predicted concepts through ``beta``.
    """
    pred_concepts = np.asarray(pred_concepts, dtype=np.int64)
    true_concepts = np.asarray(true_concepts, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if pred_concepts.shape != true_concepts.shape or true_labels.shape[0] != true_concepts.shape[0]:
        raise ValueError("predictions and ground truth are not aligned")
    cm = confusion_matrix(true_concepts, pred_concepts, n_classes)
    pred_labels = beta(pred_concepts)
    cm_y = confusion_matrix(true_labels, pred_labels, n_labels)
    precision, recall, _ = per_class_scores(cm)
    report = MetricReport(
        acc_c=accuracy(cm), f1_c=macro_f1(cm),
        acc_y=accuracy(cm_y), f1_y=macro_f1(cm_y),
        cls_c=concept_collapse(cm),
        precision_c=tuple(float(p) for p in precision),
        recall_c=tuple(float(r) for r in recall),
    )
    return report, cm


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k in METRIC_NAMES:
        w.writerow([k, _fmt(getattr(report, k))])
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth"] + [str(c) for c in cm.classes])
    for c, row in zip(cm.classes, cm.counts):
        w.writerow([str(c)] + [str(int(v)) for v in row])
    return buf.getvalue()


def read_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    classes = tuple(int(c) for c in rows[0][1:])
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, classes)


def metrics_table_csv(rows: Sequence[tuple[str, MetricReport | dict]]) -> str:
    """Rows of ``seed,acc_c,f1_c,acc_y,f1_y,cls_c``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", *METRIC_NAMES])
    for seed, rep in rows:
        vals = rep.as_row() if isinstance(rep, MetricReport) else rep
        w.writerow([str(seed)] + [_fmt(vals[k]) for k in METRIC_NAMES])
    return buf.getvalue()


def read_metrics_table(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({"seed": row["seed"], **{k: float(row[k]) for k in METRIC_NAMES}})
    return out


def read_report_csv(text: str) -> dict[str, float]:
    return {row["metric"]: float(row["value"]) for row in csv.DictReader(io.StringIO(text))}


def aggregate(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and population standard deviation per metric."""
    out = {}
    for k in METRIC_NAMES:
        vals = np.array([getattr(r, k) for r in reports])
        out[k] = (float(vals.mean()), float(vals.std()))
    return out
