"""Dice, Jaccard, precision and recall for binary lesion masks (lesion = positive)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    precision: float
    recall: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m)).astype(bool)


def confusion(pred, truth) -> Confusion:
    p, t = _binary(pred), _binary(truth)
    if p.shape != t.shape:
        raise InputError(f"prediction {p.shape} and ground truth {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Confusion(tp, fp, p.size - tp - fp - fn, fn)


def metric_report(c: Confusion) -> MetricReport:
    """Apply the four formulas. Empty denominators resolve to 1 and are flagged."""
    flags = []
    pred_pos = c.tp + c.fp
    true_pos = c.tp + c.fn
    union = c.tp + c.fp + c.fn
    if union == 0:
        return MetricReport(1.0, 1.0, 1.0, 1.0, ["empty-prediction-and-truth"])
    dice = 2 * c.tp / (pred_pos + true_pos)
    jaccard = c.tp / union
    if pred_pos:
        precision = c.tp / pred_pos
    else:
        precision = 1.0
        flags.append("precision-undefined")
    if true_pos:
        recall = c.tp / true_pos
    else:
        recall = 1.0
        flags.append("recall-undefined")
    return MetricReport(dice, jaccard, precision, recall, flags)


def evaluate(pred, truth) -> MetricReport:
    return metric_report(confusion(pred, truth))


def corpus_mean(reports: list[MetricReport]) -> dict[str, float]:
    if not reports:
        raise InputError("no reports to average")
    keys = ("dice", "jaccard", "precision", "recall")
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
