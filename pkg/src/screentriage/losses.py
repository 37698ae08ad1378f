"""Training losses: focal loss, MSE, weighted multi-task sum, triage cost.

Focal loss follows FL(p_t) = -alpha * (1 - p_t)^gamma * ln(p_t) with
p_t = p for positive labels and 1 - p otherwise. The triage cost per
patient is

    w + b_r * w * l_r + b_c * (1 - w) * l_c

where w in [0,1] is the probability of sending the patient to the
radiologist, and l_r / l_c are 0/1 indicators that the radiologist /
classifier misdiagnoses that patient. All functions accept scalars or
numpy arrays and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EPS",
    "FocalParams",
    "TaskWeights",
    "TASK_NAMES",
    "p_t",
    "focal_loss",
    "focal_grad",
    "mse",
    "mtl_loss",
    "triage_sample_loss",
]

# Probability clamp applied before logarithms.
EPS = 1e-7

TASK_NAMES = ("diagnosis", "sign", "suspicion", "conspicuity", "density", "age")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class TaskWeights:
    """Per-task loss weights; diagnosis must dominate the auxiliaries."""

    diagnosis: float = 1.0
    sign: float = 0.25
    suspicion: float = 0.25
    conspicuity: float = 0.2
    density: float = 0.15
    age: float = 0.15

    def __post_init__(self) -> None:
        vals = [getattr(self, t) for t in TASK_NAMES]
        if any(v < 0 for v in vals):
            raise ValueError("task weights must be >= 0")
        if self.diagnosis < sum(vals) - self.diagnosis - 1e-12:
            raise ValueError("diagnosis weight dominated by auxiliary weights")

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TASK_NAMES}


def _maybe_scalar(x: np.ndarray, *inputs) -> np.ndarray | float:
    if all(np.ndim(v) == 0 for v in inputs):
        return float(x)
    return x


def p_t(p, y):
    """p if y == 1 else 1 - p. Rejects probabilities outside (0, 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("probability out of range")
    out = np.where(np.asarray(y) == 1, p_arr, 1.0 - p_arr)
    return _maybe_scalar(out, p, y)


def _clamped_pt(p, y) -> np.ndarray:
    p_arr = np.clip(np.asarray(p, dtype=float), EPS, 1.0 - EPS)
    return np.where(np.asarray(y) == 1, p_arr, 1.0 - p_arr)


def focal_loss(p, y, fp: FocalParams = FocalParams()):
    """-alpha * (1 - p_t)^gamma * ln(p_t), elementwise."""
    pt = _clamped_pt(p, y)
    out = -fp.alpha * np.power(1.0 - pt, fp.gamma) * np.log(pt)
    return _maybe_scalar(out, p, y)


def focal_grad(p, y, fp: FocalParams = FocalParams()):
    """Analytic d(focal_loss)/dp.

    d/dp_t [-a(1-pt)^g ln pt] = a*g*(1-pt)^(g-1)*ln(pt) - a*(1-pt)^g/pt,
    and dp_t/dp is +1 for y=1, -1 for y=0.
    """
    pt = _clamped_pt(p, y)
    one_minus = 1.0 - pt
    if fp.gamma == 0.0:
        d_pt = -fp.alpha / pt
    else:
        d_pt = fp.alpha * fp.gamma * np.power(one_minus, fp.gamma - 1.0) * np.log(pt) - fp.alpha * np.power(
            one_minus, fp.gamma
        ) / pt
    out = np.where(np.asarray(y) == 1, d_pt, -d_pt)
    return _maybe_scalar(out, p, y)


def mse(pred, target):
    """(pred - target)^2, elementwise."""
    out = np.square(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return _maybe_scalar(out, pred, target)


def mtl_loss(per_task_losses: dict[str, float], w: TaskWeights = TaskWeights()) -> float:
    """Weighted sum of per-task losses over the six output heads."""
    unknown = set(per_task_losses) - set(TASK_NAMES)
    if unknown:
        raise ValueError(f"unknown task names: {sorted(unknown)}")
    return float(sum(getattr(w, t) * v for t, v in per_task_losses.items()))


def triage_sample_loss(w_x, l_r, l_c, b_r: float, b_c: float):
    """Per-patient triage cost: workload plus penalized misdiagnoses."""
    if b_r < 0 or b_c < 0:
        raise ValueError("penalty weights must be >= 0")
    w_arr = np.asarray(w_x, dtype=float)
    if np.any(w_arr < 0.0) or np.any(w_arr > 1.0):
        raise ValueError("w_x out of [0,1]")
    lr = np.asarray(l_r, dtype=float)
    lc = np.asarray(l_c, dtype=float)
    out = w_arr + b_r * w_arr * lr + b_c * (1.0 - w_arr) * lc
    return _maybe_scalar(out, w_x, l_r, l_c)
