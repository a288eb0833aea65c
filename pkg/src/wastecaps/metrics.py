"""Classification metrics: confusion matrices, per-class precision/recall/F1,
macro and weighted aggregates, and table rendering.

Conventions: confusion rows are true classes, columns are predicted classes.
Any metric whose denominator is zero is defined as 0.0 and noted in the
report's ``warnings`` list. Macro F1 is the unweighted mean of per-class F1
scores (not the harmonic mean of the macro precision and recall).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (num_classes, num_classes) int64
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class EvalReport:
    class_names: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: ConfusionMatrix | None = None
    warnings: list[str] = field(default_factory=list)


def confusion(true_labels, predicted_labels, num_classes: int,
              class_names: list[str] | None = None) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a num_classes x num_classes grid."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label length mismatch: {t.size} true vs {p.size} predicted")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    if class_names is None:
        class_names = [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, list(class_names))


def compute_report(cm: ConfusionMatrix) -> EvalReport:
    """Derive the full metric set from a confusion matrix."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    k = cm.num_classes
    tp = np.diag(counts)
    pred_totals = counts.sum(axis=0)
    support = counts.sum(axis=1)

    warnings: list[str] = []
    precision = np.zeros(k)
    recall = np.zeros(k)
    f1 = np.zeros(k)
    for c in range(k):
        if pred_totals[c] > 0:
            precision[c] = tp[c] / pred_totals[c]
        else:
            warnings.append(f"precision for class {cm.class_names[c]} has no predictions; defined as 0")
        if support[c] > 0:
            recall[c] = tp[c] / support[c]
        else:
            warnings.append(f"recall for class {cm.class_names[c]} has no support; defined as 0")
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        else:
            warnings.append(f"F1 for class {cm.class_names[c]} degenerate; defined as 0")

    weights = support / total
    return EvalReport(
        class_names=list(cm.class_names),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((weights * precision).sum()),
        weighted_recall=float((weights * recall).sum()),
        weighted_f1=float((weights * f1).sum()),
        confusion=cm,
        warnings=warnings,
    )


def format_metric(x: float) -> str:
    """Three decimal places with exact round-half-up on the printed value."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def render_table(reports: list[tuple[str, EvalReport]]) -> str:
    """Macro and weighted precision/recall/F1, one pair of rows per model."""
    if not reports:
        raise ValueError("render_table needs at least one report")
    name_w = max(len("model"), max(len(name) for name, _ in reports))
    header = f"{'model':<{name_w}}  {'average':<9}  precision  recall  f1"
    lines = [header]
    for name, rep in reports:
        for avg, p, r, f in (
            ("macro", rep.macro_precision, rep.macro_recall, rep.macro_f1),
            ("weighted", rep.weighted_precision, rep.weighted_recall, rep.weighted_f1),
        ):
            lines.append(
                f"{name:<{name_w}}  {avg:<9}  {format_metric(p):<9}  "
                f"{format_metric(r):<6}  {format_metric(f)}"
            )
    return "\n".join(lines) + "\n"


def render_per_class(rep: EvalReport) -> str:
    """Per-class precision/recall/F1/support block."""
    name_w = max(len("class"), max(len(n) for n in rep.class_names))
    lines = [f"{'class':<{name_w}}  precision  recall  f1     support"]
    for i, n in enumerate(rep.class_names):
        lines.append(
            f"{n:<{name_w}}  {format_metric(rep.precision[i]):<9}  "
            f"{format_metric(rep.recall[i]):<6}  {format_metric(rep.f1[i]):<5}  "
            f"{int(rep.support[i])}"
        )
    lines.append(f"accuracy: {format_metric(rep.accuracy)}")
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix) -> str:
    """Grid file body: class-name header row, then one integer row per true class."""
    lines = [",".join(["true\\pred"] + cm.class_names)]
    for i, name in enumerate(cm.class_names):
        lines.append(",".join([name] + [str(int(v)) for v in cm.counts[i]]))
    return "\n".join(lines) + "\n"


def parse_confusion(text: str) -> ConfusionMatrix:
    lines = [ln for ln in text.strip().splitlines() if ln]
    names = lines[0].split(",")[1:]
    counts = np.array(
        [[int(v) for v in ln.split(",")[1:]] for ln in lines[1:]], dtype=np.int64
    )
    if counts.shape != (len(names), len(names)):
        raise ValueError("malformed confusion grid")
    return ConfusionMatrix(counts, names)
