"""Multiclass confusion-matrix statistics and one-vs-rest ROC curves.

Undefined values (any 0/0) are represented by ``None`` and never turn into
NaN. Per-class formulas::

    ACC  = (TP+TN)/POP            TPR = TP/(TP+FN)     TNR = TN/(TN+FP)
    FNR  = 1-TPR                  FPR = 1-TNR          PPV = TP/(TP+FP)
    F1   = 2 PPV TPR/(PPV+TPR)    AUC = (TPR+TNR)/2    BM  = TPR+TNR-1
    G    = sqrt(PPV TPR)          OOC = TP/sqrt((TP+FP)(TP+FN))
    MCC  = (TP TN - FP FN)/sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))
    RACC = (TP+FP)(TP+FN)/POP^2   BCD = |FP-FN|/(2 POP)
    AGM  = (sqrt(TPR TNR) + TNR Nn)/(1 + Nn),  Nn = (TN+FP)/POP,  0 if TPR = 0
    AGF  = sqrt(F2 * F0.5'),  F0.5' computed on the label-swapped counts
    CEN  = confusion entropy of the class row/column, log base 2(K-1)
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CLASS_METRICS = ("ACC", "AGF", "AGM", "AUC", "BCD", "BM", "CEN", "F1", "FNR", "FPR",
                 "G", "MCC", "OOC", "PPV", "RACC", "TNR", "TPR")
OVERALL_METRICS = ("OA", "FNR-M", "FPR-M", "TNR-M", "OM")


class ConfusionMatrix:
    """K x K counts, rows = actual category, columns = predicted category."""

    def __init__(self, counts, categories: Sequence[str] | None = None):
        counts = np.array(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ValueError(f"confusion matrix must be K x K with K >= 2, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts
        k = counts.shape[0]
        self.categories = list(categories) if categories is not None else [str(i) for i in range(k)]
        if len(self.categories) != k:
            raise ValueError(f"{len(self.categories)} category names for a {k}x{k} matrix")

    @classmethod
    def empty(cls, k: int, categories: Sequence[str] | None = None) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64), categories)

    @classmethod
    def from_decisions(cls, actual: Iterable[int], predicted: Iterable[int], k: int,
                       categories: Sequence[str] | None = None) -> "ConfusionMatrix":
        cm = cls.empty(k, categories)
        for a, p in zip(actual, predicted):
            cm.accumulate(a, p)
        return cm

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def pop(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    def accumulate(self, actual: int, predicted: int) -> "ConfusionMatrix":
        if not (0 <= actual < self.k and 0 <= predicted < self.k):
            raise IndexError(f"category index out of range for K={self.k}: ({actual}, {predicted})")
        self.counts[actual, predicted] += 1
        return self

    def decisions(self) -> list[tuple[int, int]]:
        """One (actual, predicted) pair per counted sample, row-major."""
        return [(a, p) for a in range(self.k) for p in range(self.k) for _ in range(self.counts[a, p])]

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.categories)
        w.writerows(self.counts.tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if any(cell.strip() for cell in r)]
        if len(rows) < 3:
            raise ValueError("confusion-matrix CSV needs a header and at least 2 count rows")
        header = [c.strip() for c in rows[0]]
        body = rows[1:]
        # tolerate a leading label column: header starts with an empty cell
        if header and header[0] == "" and len(header) == len(body) + 1:
            header = header[1:]
            body = [r[1:] for r in body]
        if len(body) != len(header):
            raise ValueError(f"header lists {len(header)} categories but {len(body)} count rows follow")
        try:
            counts = [[int(c) for c in r] for r in body]
        except ValueError:
            raise ValueError("confusion-matrix counts must be integers") from None
        return cls(counts, header)


@dataclass(frozen=True)
class ClassStats:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def pop(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ClassStats":
        return ClassStats(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def per_class_stats(cm: ConfusionMatrix, k: int) -> ClassStats:
    if not 0 <= k < cm.k:
        raise IndexError(f"category {k} out of range for K={cm.k}")
    c = cm.counts
    tp = int(c[k, k])
    fn = int(c[k].sum()) - tp
    fp = int(c[:, k].sum()) - tp
    return ClassStats(tp, fp, fn, cm.pop - tp - fn - fp)


def _div(num, den):
    return None if den == 0 else num / den


def _f_beta(ppv, tpr, beta):
    if ppv is None or tpr is None:
        return None
    b2 = beta * beta
    return _div((1 + b2) * ppv * tpr, b2 * ppv + tpr)


def binary_metrics(s: ClassStats) -> dict[str, float | None]:
    """The 16 per-class metrics that depend only on TP/FP/FN/TN."""
    pop = s.pop
    tpr = _div(s.tp, s.tp + s.fn)
    tnr = _div(s.tn, s.tn + s.fp)
    ppv = _div(s.tp, s.tp + s.fp)
    both = tpr is not None and tnr is not None
    pos_prod = (s.tp + s.fp) * (s.tp + s.fn)
    mcc_den = pos_prod * (s.tn + s.fp) * (s.tn + s.fn)

    if tpr == 0:
        agm = 0.0
    elif both:
        nn = (s.tn + s.fp) / pop
        agm = (math.sqrt(tpr * tnr) + tnr * nn) / (1 + nn)
    else:
        agm = None

    sw = s.swapped()
    inv_f05 = _f_beta(_div(sw.tp, sw.tp + sw.fp), _div(sw.tp, sw.tp + sw.fn), 0.5)
    f2 = _f_beta(ppv, tpr, 2.0)

    return {
        "ACC": _div(s.tp + s.tn, pop),
        "AGF": math.sqrt(f2 * inv_f05) if f2 is not None and inv_f05 is not None else None,
        "AGM": agm,
        "AUC": (tpr + tnr) / 2 if both else None,
        "BCD": _div(abs(s.fp - s.fn), 2 * pop),
        "BM": tpr + tnr - 1 if both else None,
        "F1": _f_beta(ppv, tpr, 1.0),
        "FNR": 1 - tpr if tpr is not None else None,
        "FPR": 1 - tnr if tnr is not None else None,
        "G": math.sqrt(ppv * tpr) if ppv is not None and tpr is not None else None,
        "MCC": _div(s.tp * s.tn - s.fp * s.fn, math.sqrt(mcc_den)) if mcc_den else None,
        "OOC": _div(s.tp, math.sqrt(pos_prod)) if pos_prod else None,
        "PPV": ppv,
        "RACC": _div(pos_prod, pop * pop),
        "TNR": tnr,
        "TPR": tpr,
    }


def confusion_entropy(cm: ConfusionMatrix, j: int) -> float | None:
    c = cm.counts
    denom = int(c[j].sum() + c[:, j].sum())
    if denom == 0:
        return None
    base = math.log(2 * (cm.k - 1))
    total = 0.0
    for k in range(cm.k):
        if k == j:
            continue
        for v in (c[j, k], c[k, j]):
            if v:
                p = v / denom
                total -= p * math.log(p) / base
    return total + 0.0


def class_metrics(cm: ConfusionMatrix, k: int) -> dict[str, float | None]:
    out = binary_metrics(per_class_stats(cm, k))
    out["CEN"] = confusion_entropy(cm, k)
    return {name: out[name] for name in CLASS_METRICS}


def _macro(values: list[float | None], name: str) -> float | None:
    defined = [v for v in values if v is not None]
    if len(defined) < len(values):
        warnings.warn(f"{name}: {len(values) - len(defined)} undefined per-class value(s) excluded",
                      RuntimeWarning, stacklevel=3)
    return sum(defined) / len(defined) if defined else None


def overall_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    if cm.pop == 0:
        raise ValueError("confusion matrix is empty")
    per = [binary_metrics(per_class_stats(cm, k)) for k in range(cm.k)]
    c = cm.counts.astype(np.float64)
    s = c.sum()
    p = c.sum(axis=0)
    t = c.sum(axis=1)
    den = (s * s - (p * p).sum()) * (s * s - (t * t).sum())
    om = (np.trace(c) * s - (p * t).sum()) / math.sqrt(den) if den > 0 else None
    return {
        "OA": cm.trace / cm.pop,
        "FNR-M": _macro([m["FNR"] for m in per], "FNR-M"),
        "FPR-M": _macro([m["FPR"] for m in per], "FPR-M"),
        "TNR-M": _macro([m["TNR"] for m in per], "TNR-M"),
        "OM": om,
    }


@dataclass
class MetricReport:
    categories: list[str]
    per_class: dict[str, dict[str, float | None]]  # metric -> category -> value
    overall: dict[str, float | None]

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricReport":
        rows = {name: {} for name in CLASS_METRICS}
        for k, cat in enumerate(cm.categories):
            for name, v in class_metrics(cm, k).items():
                rows[name][cat] = v
        return cls(list(cm.categories), rows, overall_metrics(cm))

    def rendered(self) -> dict:
        """Per-class values at 4 decimals, overall values as percentages at 2."""
        def r4(v):
            return None if v is None else round(v, 4)

        def pct(v):
            return None if v is None else round(100 * v, 2)

        return {
            "categories": self.categories,
            "per_class": {m: {c: r4(v) for c, v in row.items()} for m, row in self.per_class.items()},
            "overall_percent": {m: pct(v) for m, v in self.overall.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.rendered(), indent=2) + "\n"

    def to_csv(self) -> str:
        doc = self.rendered()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.categories])
        for m in CLASS_METRICS:
            w.writerow([m, *("" if doc["per_class"][m][c] is None else doc["per_class"][m][c]
                             for c in self.categories)])
        w.writerow([])
        w.writerow(["overall", "percent"])
        for m in OVERALL_METRICS:
            v = doc["overall_percent"][m]
            w.writerow([m, "" if v is None else f"{v:.2f}"])
        return buf.getvalue()


# --------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "FPR", "TPR"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def roc_points(scores, labels, k: int) -> RocCurve:
    """One-vs-rest ROC of category ``k`` over every distinct score threshold.

    Samples with equal scores enter the curve together, so tied groups give
    diagonal segments. The first point is (0, 0) at threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == k
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"ROC for category {k} needs both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, fpr, tpr, auc)
