"""Evaluation metrics: confusion counts, minority-class P/R/F1, ROC/AUROC.

Label 1 (the anomaly / minority class) is the positive class everywhere.
AUROC uses a threshold sweep over distinct scores with trapezoidal
interpolation across tied groups; the area is accumulated in integer
arithmetic so it equals the Mann-Whitney pair statistic (ties counted one
half) exactly, not just to rounding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Prf1:
    precision: float
    recall: float
    f1: float
    # names of ratios whose denominator was zero and were reported as 0
    undefined: tuple[str, ...] = ()


@dataclass(frozen=True)
class EvalReport:
    """One model evaluated on one dataset; one CSV row."""

    model: str
    dataset: str
    accuracy: float
    auroc: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int
    config_hash: str


CSV_COLUMNS = [f.name for f in fields(EvalReport)]


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be 0/1, got values {np.unique(a)}")
    return a.astype(np.int64)


def confusion(labels, predictions) -> Confusion:
    """Standard binary confusion counts with label 1 as positive."""
    labels = _binary(labels, "labels")
    predictions = _binary(predictions, "predictions")
    if labels.shape != predictions.shape:
        raise ValueError(
            f"labels length {labels.shape} != predictions length {predictions.shape}"
        )
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    return Confusion(tp=tp, fp=fp, tn=tn, fn=fn)


def prf1(c: Confusion) -> Prf1:
    """Precision/recall/F1 for the positive class.

    Zero-denominator ratios are reported as 0 and named in ``undefined``
    instead of returning NaN, so downstream tables always render.
    """
    undefined = []
    if c.tp + c.fp > 0:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision, undefined = 0.0, undefined + ["precision"]
    if c.tp + c.fn > 0:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall, undefined = 0.0, undefined + ["recall"]
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, undefined = 0.0, undefined + ["f1"]
    return Prf1(precision=precision, recall=recall, f1=f1, undefined=tuple(undefined))


def accuracy(c: Confusion) -> float:
    return (c.tp + c.tn) / c.total


def roc_auc(labels, scores) -> tuple[list[tuple[float, float]], float]:
    """ROC points and AUROC from continuous scores (higher = more anomalous).

    Thresholds sweep every distinct score; tied scores advance TP and FP
    jointly, which the trapezoid credits with half weight, matching the
    pair-counting definition exactly.

    Returns:
        (points, auroc) where points runs from (0, 0) to (1, 1) in
        (false positive rate, true positive rate) coordinates.

    Raises:
        ValueError: "AUROC undefined" when either class is absent.
    """
    labels = _binary(labels, "labels")
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError(f"labels length {labels.shape} != scores length {scores.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: need at least one positive and one negative")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]

    points = [(0.0, 0.0)]
    tp = fp = 0
    area2 = 0  # twice the area, in units of 1/(n_pos*n_neg)
    i = 0
    while i < y.size:
        j = i
        while j < y.size and s[j] == s[i]:
            j += 1
        dtp = int(y[i:j].sum())
        dfp = (j - i) - dtp
        area2 += dfp * (2 * tp + dtp)
        tp += dtp
        fp += dfp
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points, area2 / (2 * n_pos * n_neg)


def evaluate(
    labels,
    predictions,
    scores,
    *,
    model: str,
    dataset: str,
    seed: int,
    config_hash: str,
) -> EvalReport:
    """Assemble the full report for one model on one labeled dataset."""
    c = confusion(labels, predictions)
    p = prf1(c)
    _, auroc = roc_auc(labels, scores)
    return EvalReport(
        model=model,
        dataset=dataset,
        accuracy=accuracy(c),
        auroc=auroc,
        precision=p.precision,
        recall=p.recall,
        f1=p.f1,
        tp=c.tp,
        fp=c.fp,
        tn=c.tn,
        fn=c.fn,
        seed=seed,
        config_hash=config_hash,
    )


def _row(report: EvalReport) -> list[str]:
    out = []
    for name in CSV_COLUMNS:
        value = getattr(report, name)
        if isinstance(value, float):
            out.append(repr(value))  # shortest round-tripping decimal
        else:
            out.append(str(value))
    return out


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(_row(r))
    return buf.getvalue()


def write_reports(reports: list[EvalReport], path: str | Path) -> None:
    Path(path).write_text(reports_to_csv(reports), encoding="utf-8")


def read_reports(path: str | Path) -> list[EvalReport]:
    """Parse a report CSV written by :func:`write_reports`."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_COLUMNS:
        raise ValueError(f"{path}: not a report CSV (header {rows[:1]!r})")
    reports = []
    for row in rows[1:]:
        values = dict(zip(CSV_COLUMNS, row))
        reports.append(
            EvalReport(
                model=values["model"],
                dataset=values["dataset"],
                accuracy=float(values["accuracy"]),
                auroc=float(values["auroc"]),
                precision=float(values["precision"]),
                recall=float(values["recall"]),
                f1=float(values["f1"]),
                tp=int(values["tp"]),
                fp=int(values["fp"]),
                tn=int(values["tn"]),
                fn=int(values["fn"]),
                seed=int(values["seed"]),
                config_hash=values["config_hash"],
            )
        )
    return reports
