"""Binary screening metrics: confusion counts, rates, F1, Cohen's kappa, ROC/PR curves.

All scored inputs are parallel arrays of probability-like scores in [0, 1]
and hard labels in {0, 1}. Thresholding is always `score >= threshold` on
the positive (malignant) class. Degenerate inputs raise ValueError rather
than returning NaN, so callers cannot silently average garbage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "Curve",
    "confusion",
    "fnr",
    "fpr",
    "fnr_fpr",
    "sensitivity",
    "specificity",
    "f1_score",
    "cohen_kappa",
    "roc_curve",
    "pr_curve",
    "trapezoid_area",
    "step_area",
    "auroc",
    "auprc",
]


@dataclass(frozen=True)
class ConfusionCounts:
    """2x2 confusion table for a binary screening decision."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative count: {name}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.tn + other.tn,
            self.fp + other.fp,
            self.fn + other.fn,
        )


@dataclass(frozen=True)
class Curve:
    """Piecewise-linear curve as (x, y) vertices with non-decreasing x."""

    x: np.ndarray
    y: np.ndarray


def _validate_scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.size == 0:
        raise ValueError("no samples")
    if s.size != y.size:
        raise ValueError(f"scores and labels length mismatch: {s.size} vs {y.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(int)


def confusion(scores, labels, threshold: float) -> ConfusionCounts:
    """Confusion counts at a fixed threshold (score >= threshold is positive)."""
    s, y = _validate_scored(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def fnr(c: ConfusionCounts) -> float:
    """False-negative rate FN / (TP + FN)."""
    if c.positives == 0:
        raise ValueError("undefined rate: no positive samples")
    return c.fn / c.positives


def fpr(c: ConfusionCounts) -> float:
    """False-positive rate FP / (TN + FP)."""
    if c.negatives == 0:
        raise ValueError("undefined rate: no negative samples")
    return c.fp / c.negatives


def fnr_fpr(c: ConfusionCounts) -> tuple[float, float]:
    """Both error rates at once; the pair Algorithm-style feasibility checks consume."""
    return fnr(c), fpr(c)


def sensitivity(c: ConfusionCounts) -> float:
    return 1.0 - fnr(c)


def specificity(c: ConfusionCounts) -> float:
    return 1.0 - fpr(c)


def f1_score(c: ConfusionCounts) -> float:
    """F1 = 2TP / (2TP + FP + FN)."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise ValueError("F1 undefined: no positive labels or predictions")
    return 2 * c.tp / denom


def cohen_kappa(c: ConfusionCounts) -> float:
    """Chance-corrected agreement between decision and outcome.

    kappa = (p_o - p_e) / (1 - p_e) with
    p_o = (TP + TN) / N and
    p_e = [(TP+FP)(TP+FN) + (TN+FN)(TN+FP)] / N^2.
    """
    n = c.total
    if n == 0:
        raise ValueError("no samples")
    p_o = (c.tp + c.tn) / n
    p_e = ((c.tp + c.fp) * (c.tp + c.fn) + (c.tn + c.fn) * (c.tn + c.fp)) / (n * n)
    if p_e == 1.0:
        raise ValueError("kappa undefined: degenerate marginals")
    return (p_o - p_e) / (1.0 - p_e)


def roc_curve(scores, labels) -> Curve:
    """ROC vertices (FPR, TPR) swept over thresholds, from (0,0) to (1,1).

    Thresholds descend through the distinct scores; tied scores enter
    together, which makes the trapezoid area handle ties the same way as
    pair counting with half credit.
    """
    s, y = _validate_scored(scores, labels)
    n_pos = int(np.sum(y))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: needs both classes")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    # Indices where the score changes (last occurrence of each distinct value).
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [y_sorted.size - 1]])
    tp_cum = np.cumsum(y_sorted)[cut]
    fp_cum = np.cumsum(1 - y_sorted)[cut]
    x = np.concatenate([[0.0], fp_cum / n_neg])
    ty = np.concatenate([[0.0], tp_cum / n_pos])
    return Curve(x=x, y=ty)


def pr_curve(scores, labels) -> Curve:
    """Precision-recall vertices from (0, 1) to (1, prevalence-at-min-score).

    x is recall (non-decreasing), y is precision at each distinct threshold.
    """
    s, y = _validate_scored(scores, labels)
    n_pos = int(np.sum(y))
    if n_pos == 0:
        raise ValueError("AUPRC undefined: no positive samples")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [y_sorted.size - 1]])
    tp_cum = np.cumsum(y_sorted)[cut]
    pred_pos = cut + 1.0
    recall = np.concatenate([[0.0], tp_cum / n_pos])
    precision = np.concatenate([[1.0], tp_cum / pred_pos])
    return Curve(x=recall, y=precision)


def trapezoid_area(curve: Curve) -> float:
    """Area under a piecewise-linear curve by the trapezoid rule."""
    return float(np.trapezoid(curve.y, curve.x))


def step_area(curve: Curve) -> float:
    """Area under a right-continuous step curve: sum of dx * y at the right vertex."""
    dx = np.diff(curve.x)
    return float(np.sum(dx * curve.y[1:]))


def auroc(scores, labels) -> float:
    """Area under the ROC curve (trapezoid integration of roc_curve)."""
    return trapezoid_area(roc_curve(scores, labels))


def auprc(scores, labels) -> float:
    """Average precision: step-wise area under pr_curve, no interpolation."""
    return step_area(pr_curve(scores, labels))
