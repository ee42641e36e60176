"""Evaluation metrics for binary segmentation: Jaccard, Dice, confusion
rates, F1, and pooled ROC/AUC, plus CSV report writers.

All overlap metrics are computed from integer pixel counts and divided once,
so algebraic identities (dice == 2J/(1+J), f1 == dice) hold exactly in
floating point. Confusion rates are normalized per image by the union of
annotated-positive and predicted-positive pixels, so tp + fp + fn = 1; the
raw counts are reported alongside.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np


class MetricError(ValueError):
    pass


def _as_bool(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        a = a > 0.5 if a.dtype.kind == "f" else a.astype(bool)
    return a


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(p) >= threshold


def jaccard(a, b) -> float:
    """|A & B| / |A | B|; defined as 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return 1.0 if union == 0 else inter / union


def dice_coeff(a, b) -> float:
    """2|A & B| / (|A| + |B|); defined as 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    inter = int(np.logical_and(a, b).sum())
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else (2 * inter) / total


@dataclass
class ConfusionResult:
    tp: int
    fp: int
    fn: int
    tn: int
    tp_rate: float
    fp_rate: float
    fn_rate: float
    f1: float


def confusion(gt, pred) -> ConfusionResult:
    """Pixel confusion counts plus rates normalized by |gt | pred|."""
    gt, pred = _as_bool(gt), _as_bool(pred)
    tp = int(np.logical_and(gt, pred).sum())
    fp = int(np.logical_and(~gt, pred).sum())
    fn = int(np.logical_and(gt, ~pred).sum())
    tn = int(gt.size) - tp - fp - fn
    union = tp + fp + fn
    if union == 0:
        return ConfusionResult(0, 0, 0, tn, 0.0, 0.0, 0.0, 1.0)
    return ConfusionResult(tp, fp, fn, tn,
                           tp / union, fp / union, fn / union,
                           (2 * tp) / (2 * tp + fp + fn))


def roc_curve(scores, labels):
    """ROC points and trapezoidal AUC over pooled scores.

    Returns (points, auc) where points is a float array of rows
    (threshold, fpr, tpr), tie groups collapsed to single points, with a
    leading (+inf, 0, 0) anchor. The area accumulates in exact integer
    arithmetic and is divided once by 2 * n_pos * n_neg.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _as_bool(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # group ties: indices where the next score differs
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    tp_cum = np.cumsum(y)[ends]
    fp_cum = np.cumsum(~y)[ends]
    area2 = 0
    prev_tp = 0
    prev_fp = 0
    rows = [(np.inf, 0.0, 0.0)]
    for i in range(ends.size):
        tp, fp = int(tp_cum[i]), int(fp_cum[i])
        area2 += (fp - prev_fp) * (tp + prev_tp)
        rows.append((float(s[ends[i]]), fp / n_neg, tp / n_pos))
        prev_tp, prev_fp = tp, fp
    auc = area2 / (2 * n_pos * n_neg)
    return np.asarray(rows, dtype=np.float64), auc


def roc_auc(scores, labels) -> float:
    return roc_curve(scores, labels)[1]


@dataclass
class MetricsReport:
    jaccard: float
    dice: float
    tp_rate: float
    fp_rate: float
    fn_rate: float
    f1: float
    auc: float
    latency_mean_s: float | None = None
    latency_std_s: float | None = None


def evaluate_decoder(probs, gts, threshold: float = 0.5):
    """Aggregate per-image metrics for one decoder over a dataset.

    probs: iterable of [H,W] probability maps; gts: matching binary masks.
    Returns (MetricsReport, per_image) where per_image is a list of dicts
    with per-image metrics and raw confusion counts. AUC is computed on all
    pixels pooled into one curve.
    """
    per_image = []
    pooled_scores = []
    pooled_labels = []
    for i, (p, g) in enumerate(zip(probs, gts)):
        p = np.asarray(p, dtype=np.float64)
        g = _as_bool(g)
        pred = binarize(p, threshold)
        c = confusion(g, pred)
        per_image.append({
            "index": i,
            "jaccard": jaccard(g, pred),
            "dice": dice_coeff(g, pred),
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
            "tp_rate": c.tp_rate, "fp_rate": c.fp_rate, "fn_rate": c.fn_rate,
            "f1": c.f1,
        })
        pooled_scores.append(p.ravel())
        pooled_labels.append(g.ravel())
    if not per_image:
        raise MetricError("cannot evaluate an empty sample set")
    mean = lambda key: float(np.mean([r[key] for r in per_image]))
    try:
        auc = roc_auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    except MetricError:
        auc = float("nan")
    report = MetricsReport(
        jaccard=mean("jaccard"), dice=mean("dice"),
        tp_rate=mean("tp_rate"), fp_rate=mean("fp_rate"), fn_rate=mean("fn_rate"),
        f1=mean("f1"), auc=auc,
    )
    return report, per_image


# -- CSV writers ---------------------------------------------------------------

_REPORT_COLUMNS = ["jaccard", "dice", "tp", "fp", "fn", "f1", "auc",
                   "latency_mean_s", "latency_std_s"]


def write_metrics_csv(path, rows: list[tuple[str, MetricsReport]]):
    """One row per labeled model/variant; rates fill the tp/fp/fn columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + _REPORT_COLUMNS)
        for label, r in rows:
            w.writerow([label] + [_fmt(v) for v in (
                r.jaccard, r.dice, r.tp_rate, r.fp_rate, r.fn_rate, r.f1, r.auc,
                r.latency_mean_s, r.latency_std_s)])


def write_roc_csv(path, points: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            w.writerow([_fmt(thr), _fmt(fpr), _fmt(tpr)])


def write_per_image_csv(path, per_image: list[dict], ids: list[str] | None = None):
    if not per_image:
        return
    cols = [k for k in per_image[0] if k != "index"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + cols)
        for r in per_image:
            rid = ids[r["index"]] if ids else str(r["index"])
            w.writerow([rid] + [_fmt(r[k]) for k in cols])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)
