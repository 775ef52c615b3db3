"""Confusion matrix and per-class precision/recall/F1."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) ints; rows = true class, cols = predicted
    class_names: list

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    precision: list
    recall: list
    f1: list
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    class_names: list

    def to_csv(self) -> str:
        lines = ["class,precision,recall,f1"]
        for name, p, r, f in zip(self.class_names, self.precision, self.recall, self.f1):
            lines.append(f"{name},{p!r},{r!r},{f!r}")
        lines.append(f"accuracy,{self.accuracy!r}")
        lines.append(f"macro_f1,{self.macro_f1!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Aligned text table: class, accuracy, precision, recall, F1."""
        rows = [("class", "accuracy", "precision", "recall", "f1")]
        for i, name in enumerate(self.class_names):
            rows.append((name, f"{self.accuracy:.4f}", f"{self.precision[i]:.4f}",
                         f"{self.recall[i]:.4f}", f"{self.f1[i]:.4f}"))
        rows.append(("macro", f"{self.accuracy:.4f}", f"{self.macro_precision:.4f}",
                     f"{self.macro_recall:.4f}", f"{self.macro_f1:.4f}"))
        widths = [max(len(r[c]) for r in rows) for c in range(5)]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows
        ) + "\n"


def confusion(predictions, labels, num_classes: int, class_names=None) -> ConfusionMatrix:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions vs {len(labels)} labels")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i, (t, p) in enumerate(zip(labels, predictions)):
        if not (0 <= t < num_classes and 0 <= p < num_classes):
            raise DataError(f"class out of range at index {i}: true={t}, pred={p}")
        counts[t, p] += 1
    names = list(class_names) if class_names else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1 with the 0/0 -> 0 convention."""
    c = cm.counts
    k = c.shape[0]
    precision, recall, f1 = [], [], []
    for i in range(k):
        col = int(c[:, i].sum())
        row = int(c[i, :].sum())
        p = c[i, i] / col if col else 0.0
        r = c[i, i] / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(f))
    total = cm.total
    accuracy = float(np.trace(c) / total) if total else 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=accuracy,
        macro_precision=sum(precision) / k,
        macro_recall=sum(recall) / k,
        macro_f1=sum(f1) / k,
        class_names=cm.class_names,
    )
