"""Classification metrics: confusion matrix, top-k accuracy, macro F1,
sensitivity and specificity (one-vs-rest)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np


class LabelError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class MetricsConfigError(ValueError):
    pass


@dataclass
class ClassRates:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class MetricsReport:
    confusion: List[List[int]]
    top1: float
    top2: float
    f1_macro: float
    sensitivity_macro: float
    specificity_macro: float
    n_samples: int
    # classes where some ratio had a zero denominator and was scored 0
    undefined_classes: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.top1 <= self.top2 + 1e-9:
            raise AssertionError(f"top-2 accuracy {self.top2} below top-1 {self.top1}")

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("undefined_classes")
        return json.dumps(d, indent=2)


def confusion_matrix(true_labels: Sequence[int], predicted: Sequence[int], k: int) -> np.ndarray:
    """k x k counts, rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise LabelError(f"label lists differ in length: {t.size} vs {p.size}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"{name} label out of range [0, {k}): {sorted(set(arr.tolist()))}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def ranked_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties rank the lower index first."""
    return np.argsort(-probs, axis=1, kind="stable")


def top_k_accuracy(probs: np.ndarray, true_labels: Sequence[int], k_top: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(true_labels, dtype=np.int64)
    n, k = probs.shape
    if not 1 <= k_top <= k:
        raise MetricsConfigError(f"k_top must be in [1, {k}], got {k_top}")
    if n == 0:
        raise EmptyInputError("top-k accuracy of zero samples")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise MetricsConfigError("probability rows must sum to 1")
    top = ranked_classes(probs)[:, :k_top]
    return 100.0 * float(np.mean(np.any(top == t[:, None], axis=1)))


def per_class_rates(confusion: np.ndarray) -> List[ClassRates]:
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise LabelError(f"confusion matrix must be square, got {cm.shape}")
    n = int(cm.sum())
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        out.append(ClassRates(tp, fp, fn, n - tp - fp - fn))
    return out


def _ratio(num: float, den: float):
    return (num / den, False) if den else (0.0, True)


def summary_metrics(confusion: np.ndarray) -> Dict[str, object]:
    """Macro-averaged F1, sensitivity and specificity, in percent.

    A class whose precision, recall or specificity has a zero denominator
    scores 0 for that quantity and is listed under ``undefined_classes``.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.sum() == 0:
        raise EmptyInputError("metrics need at least one sample")
    f1s, sens, specs, undefined = [], [], [], []
    for c, r in enumerate(per_class_rates(cm)):
        precision, bad_p = _ratio(r.tp, r.tp + r.fp)
        recall, bad_r = _ratio(r.tp, r.tp + r.fn)
        spec, bad_s = _ratio(r.tn, r.tn + r.fp)
        f1, bad_f = _ratio(2 * precision * recall, precision + recall)
        if bad_p or bad_r or bad_s or bad_f:
            undefined.append(c)
        f1s.append(f1)
        sens.append(recall)
        specs.append(spec)
    return {
        "f1_macro": 100.0 * float(np.mean(f1s)),
        "sensitivity_macro": 100.0 * float(np.mean(sens)),
        "specificity_macro": 100.0 * float(np.mean(specs)),
        "per_class_f1": [100.0 * v for v in f1s],
        "per_class_sensitivity": [100.0 * v for v in sens],
        "per_class_specificity": [100.0 * v for v in specs],
        "undefined_classes": undefined,
    }


def evaluate_predictions(probs: np.ndarray, true_labels: Sequence[int]) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(true_labels, dtype=np.int64)
    k = probs.shape[1]
    pred = ranked_classes(probs)[:, 0]
    cm = confusion_matrix(t, pred, k)
    summ = summary_metrics(cm)
    return MetricsReport(
        confusion=cm.tolist(),
        top1=top_k_accuracy(probs, t, 1),
        top2=top_k_accuracy(probs, t, min(2, k)),
        f1_macro=summ["f1_macro"],
        sensitivity_macro=summ["sensitivity_macro"],
        specificity_macro=summ["specificity_macro"],
        n_samples=int(len(t)),
        undefined_classes=summ["undefined_classes"],
    )
