"""Workload-minimizing triage: decide per patient whether the radiologist
must read the study or the machine classifier's call stands.

The triage net maps [age_norm, family_history | four per-view outputs (76)
| classifier probability] (79 features) to w in [0,1], the probability the
patient needs the radiologist. A policy is (net, alpha, beta, b_R, b_C):
patients with w >= alpha go to the radiologist; for the rest the machine
label is 1[classifier probability >= beta].

Policy search: train one candidate net per (b_R, b_C) cell of a delta-step
grid on the triage training split, then sweep alpha and beta over every
distinct validation score plus {0,1}. A cell is feasible when validation
FNR and FPR do not exceed the radiologist's own. Among feasible cells the
winner minimizes radiologist reads, breaking ties by fewer false
negatives, fewer false positives, then lower b_R, b_C, alpha, beta, so the
selection is deterministic regardless of candidate completion order.
If nothing is feasible the policy degrades to alpha=0 (everyone to the
radiologist), flagged constraint_bound.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fusion import FusionInput
from .losses import triage_sample_loss
from .metrics import ConfusionCounts, cohen_kappa, f1_score
from .netcore import DenseStack, SgdMomentum, glorot_uniform, mix_seed, sigmoid

__all__ = [
    "TRIAGE_INPUT_SIZE",
    "TriageArch",
    "TriageNet",
    "TriagePolicy",
    "TriageData",
    "OperatingPoint",
    "assemble_triage_input",
    "triage_forward",
    "route_patient",
    "system_confusion",
    "train_triage_candidate",
    "train_triage",
    "operating_curve",
    "curve_to_csv",
    "save_policy",
    "load_policy",
]

TRIAGE_INPUT_SIZE = 79


def assemble_triage_input(fi: FusionInput, clf_prob: float) -> np.ndarray:
    """[nonimaging (2) | four per-view outputs (76) | classifier probability]."""
    if not 0.0 <= clf_prob <= 1.0:
        raise ValueError("classifier probability out of [0,1]")
    v = fi.vector()
    return np.concatenate([v[-2:], v[:-2], [clf_prob]])


@dataclass(frozen=True)
class TriageArch:
    input_size: int = TRIAGE_INPUT_SIZE
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self) -> None:
        if self.input_size < 1 or len(self.hidden) == 0:
            raise ValueError("invalid triage architecture")


class TriageNet:
    """Dense stack with a single sigmoid output."""

    kind = "triage_net"

    def __init__(self, arch: TriageArch, core: DenseStack, head_w: np.ndarray, head_b: np.ndarray):
        if head_w.shape != (arch.hidden[-1], 1) or head_b.shape != (1,):
            raise ValueError("triage head shape mismatch")
        self.arch = arch
        self.core = core
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, arch: TriageArch = TriageArch(), seed: int = 0) -> "TriageNet":
        rng = np.random.default_rng(seed)
        core = DenseStack.init(rng, [arch.input_size, *arch.hidden])
        return cls(arch, core, glorot_uniform(rng, arch.hidden[-1], 1), np.zeros(1))

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        h, _ = self.core.forward(x)
        return sigmoid(h @ self.head_w + self.head_b)[:, 0]

    def forward(self, features) -> float:
        vec = np.asarray(features, dtype=float).ravel()
        if vec.size != self.arch.input_size:
            raise ValueError(
                f"dimension mismatch: got {vec.size} features, expected {self.arch.input_size}"
            )
        return float(self.forward_batch(vec[None, :])[0])

    def loss_and_grads(self, x: np.ndarray, l_r: np.ndarray, l_c: np.ndarray, b_r: float, b_c: float):
        n = x.shape[0]
        h, cache = self.core.forward(x)
        w = sigmoid(h @ self.head_w + self.head_b)[:, 0]
        if not np.all(np.isfinite(w)):
            raise ValueError("training diverged: non-finite triage output")
        loss = float(np.mean(triage_sample_loss(w, l_r, l_c, b_r, b_c)))
        dw = (1.0 + b_r * l_r - b_c * l_c) / n
        dz = (dw * w * (1.0 - w))[:, None]
        gw_head = h.T @ dz
        gb_head = dz.sum(axis=0)
        gw, gb, _ = self.core.backward(cache, dz @ self.head_w.T)
        return loss, gw + gb + [gw_head, gb_head]

    def params(self) -> list[np.ndarray]:
        return self.core.params() + [self.head_w, self.head_b]

    def copy(self) -> "TriageNet":
        return TriageNet(self.arch, self.core.copy(), self.head_w.copy(), self.head_b.copy())

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "arch": {"input_size": self.arch.input_size, "hidden": list(self.arch.hidden)},
            "core": self.core.to_jsonable(),
            "head": {"w": self.head_w.tolist(), "b": self.head_b.tolist()},
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "TriageNet":
        if d.get("kind") != cls.kind:
            raise ValueError(f"not a {cls.kind} model")
        arch = TriageArch(
            input_size=int(d["arch"]["input_size"]),
            hidden=tuple(int(h) for h in d["arch"]["hidden"]),
        )
        core = DenseStack.from_jsonable(d["core"])
        if core.sizes != [arch.input_size, *arch.hidden]:
            raise ValueError("stored trunk does not match architecture")
        w = np.asarray(d["head"]["w"], dtype=float)
        b = np.asarray(d["head"]["b"], dtype=float)
        return cls(arch, core, w, b)


@dataclass
class TriagePolicy:
    net: TriageNet
    alpha: float
    beta: float
    b_r: float
    b_c: float
    feasible: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ValueError("thresholds must lie in [0,1]")
        if self.b_r < 0 or self.b_c < 0:
            raise ValueError("penalty weights must be >= 0")


@dataclass
class TriageData:
    """One split's worth of patients, everything the policy needs."""

    x: np.ndarray  # (n, TRIAGE_INPUT_SIZE)
    rad_pred: np.ndarray  # (n,) 0/1 radiologist recall decision
    clf_prob: np.ndarray  # (n,) classifier malignancy probability
    outcome: np.ndarray  # (n,) 0/1 ground truth
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        n = self.x.shape[0]
        for name in ("rad_pred", "clf_prob", "outcome"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"missing predictions: {name} contains non-finite values")
            setattr(self, name, arr)
        if self.clf_prob.min() < 0 or self.clf_prob.max() > 1:
            raise ValueError("classifier probabilities out of [0,1]")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def l_r(self) -> np.ndarray:
        return (self.rad_pred != self.outcome).astype(float)

    @property
    def l_c(self) -> np.ndarray:
        return ((self.clf_prob >= 0.5).astype(int) != self.outcome).astype(float)


def triage_forward(policy_or_net, features) -> float:
    net = policy_or_net.net if isinstance(policy_or_net, TriagePolicy) else policy_or_net
    return net.forward(features)


def route_patient(policy: TriagePolicy, features, rad_pred: int, clf_prob: float) -> tuple[bool, int]:
    """(goes to radiologist?, final recall decision) for one patient."""
    w = triage_forward(policy, features)
    if w >= policy.alpha:
        return True, int(rad_pred)
    return False, int(clf_prob >= policy.beta)


def _system_predictions(policy: TriagePolicy, data: TriageData) -> tuple[np.ndarray, np.ndarray]:
    w = policy.net.forward_batch(data.x)
    to_rad = w >= policy.alpha
    pred = np.where(to_rad, data.rad_pred.astype(int), (data.clf_prob >= policy.beta).astype(int))
    return pred, to_rad


def system_confusion(policy: TriagePolicy, data: TriageData) -> ConfusionCounts:
    """Counts of the combined system: radiologist above alpha, machine below."""
    pred, _ = _system_predictions(policy, data)
    y = data.outcome.astype(int)
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (y == 1))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fp=int(np.sum((pred == 1) & (y == 0))),
        fn=int(np.sum((pred == 0) & (y == 1))),
    )


# -- candidate training -----------------------------------------------------------


def train_triage_candidate(
    data: TriageData,
    b_r: float,
    b_c: float,
    seed: int = 0,
    lr: float = 0.5,
    epochs: int = 150,
    hidden: tuple[int, ...] = (64, 32),
) -> TriageNet:
    """Full-batch gradient descent with momentum on the mean triage loss.

    The learning rate drops by 5x for the final 40% of epochs.
    """
    net = TriageNet.init(TriageArch(input_size=data.x.shape[1], hidden=hidden), seed=seed)
    opt = SgdMomentum()
    l_r, l_c = data.l_r, data.l_c
    switch = int(epochs * 0.6)
    for e in range(epochs):
        step_lr = lr if e < switch else lr / 5.0
        loss, grads = net.loss_and_grads(data.x, l_r, l_c, b_r, b_c)
        if not np.isfinite(loss):
            raise ValueError("training diverged: non-finite loss")
        opt.step(net.params(), grads, step_lr)
    return net


def _sweep_candidate(net: TriageNet, val: TriageData, fn_cap: float, fp_cap: float):
    """Best (n_rad, fn, fp, alpha, beta) over all threshold cells, or None.

    Vectorized over the full alpha x beta grid: patients sorted by w, the
    radiologist part of each count is a suffix sum, the machine part a
    prefix sum per beta column.
    """
    w = net.forward_batch(val.x)
    order = np.argsort(w, kind="stable")
    ws = w[order]
    ys = val.outcome.astype(int)[order]
    rs = val.rad_pred.astype(int)[order]
    cs = val.clf_prob[order]
    m = len(ws)

    alphas = np.unique(np.concatenate([ws, [0.0, 1.0]]))
    betas = np.unique(np.concatenate([cs, [0.0, 1.0]]))
    ks = np.searchsorted(ws, alphas, side="left")  # below k: machine; from k: radiologist

    rad_fn = np.concatenate([[0], np.cumsum((rs == 0) & (ys == 1))])
    rad_fp = np.concatenate([[0], np.cumsum((rs == 1) & (ys == 0))])
    rad_fn_suffix = rad_fn[-1] - rad_fn[ks]
    rad_fp_suffix = rad_fp[-1] - rad_fp[ks]

    zero_row = np.zeros((1, betas.size), dtype=np.int64)
    clf_fn = np.vstack([zero_row, np.cumsum((cs[:, None] < betas[None, :]) & (ys[:, None] == 1), axis=0)])
    clf_fp = np.vstack([zero_row, np.cumsum((cs[:, None] >= betas[None, :]) & (ys[:, None] == 0), axis=0)])

    fn_grid = rad_fn_suffix[:, None] + clf_fn[ks]
    fp_grid = rad_fp_suffix[:, None] + clf_fp[ks]
    n_rad = (m - ks)[:, None] + np.zeros(betas.size, dtype=np.int64)[None, :]

    feasible = (fn_grid <= fn_cap) & (fp_grid <= fp_cap)
    if not feasible.any():
        return None
    ai, bj = np.nonzero(feasible)
    keys = np.lexsort((betas[bj], alphas[ai], fp_grid[ai, bj], fn_grid[ai, bj], n_rad[ai, bj]))
    best = keys[0]
    i, j = ai[best], bj[best]
    return (int(n_rad[i, j]), int(fn_grid[i, j]), int(fp_grid[i, j]), float(alphas[i]), float(betas[j]))


def train_triage(
    train_data: TriageData,
    val_data: TriageData,
    delta: float = 0.25,
    b_max: float = 2.0,
    seed: int = 0,
    lr: float = 0.5,
    epochs: int = 150,
    hidden: tuple[int, ...] = (64, 32),
    threads: int = 1,
    fnr_limit: float | None = None,
    fpr_limit: float | None = None,
) -> tuple[TriagePolicy, dict]:
    """Grid search over (b_R, b_C) with the validation threshold sweep.

    Feasibility caps default to the radiologist's own false counts on the
    validation split, which keeps the comparison exact in integers.
    Candidates may train in parallel; the selection applies the
    deterministic lexicographic rule to the gathered results, so the
    winner does not depend on completion order.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    y = val_data.outcome.astype(int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if fnr_limit is None:
        fn_cap = float(np.sum((val_data.rad_pred == 0) & (y == 1)))
    else:
        fn_cap = fnr_limit * n_pos + 1e-9
    if fpr_limit is None:
        fp_cap = float(np.sum((val_data.rad_pred == 1) & (y == 0)))
    else:
        fp_cap = fpr_limit * n_neg + 1e-9

    grid_axis = np.round(np.arange(0.0, b_max + delta / 2, delta), 10)
    cells = [(float(br), float(bc)) for br in grid_axis for bc in grid_axis]

    def run_cell(gi: int):
        b_r, b_c = cells[gi]
        net = train_triage_candidate(
            train_data, b_r, b_c, seed=mix_seed(seed, 50, gi), lr=lr, epochs=epochs, hidden=hidden
        )
        return net, _sweep_candidate(net, val_data, fn_cap, fp_cap)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_cell, range(len(cells))))
    else:
        results = [run_cell(gi) for gi in range(len(cells))]

    best_key, best_policy = None, None
    for gi, (net, sweep) in enumerate(results):
        if sweep is None:
            continue
        n_rad, fn, fp, alpha, beta = sweep
        b_r, b_c = cells[gi]
        key = (n_rad, fn, fp, b_r, b_c, alpha, beta)
        if best_key is None or key < best_key:
            best_key = key
            best_policy = TriagePolicy(net=net, alpha=alpha, beta=beta, b_r=b_r, b_c=b_c)

    report = {
        "grid_cells": len(cells),
        "fn_cap": fn_cap,
        "fp_cap": fp_cap,
        "val_positives": n_pos,
        "val_negatives": n_neg,
    }
    if best_policy is None:
        # Always-radiologist fallback; w is irrelevant at alpha=0.
        policy = TriagePolicy(net=results[0][0], alpha=0.0, beta=0.5, b_r=0.0, b_c=0.0, feasible=False)
        report["selection"] = "constraint_bound"
        return policy, report
    report["selection"] = {
        "n_to_radiologist": best_key[0],
        "fn": best_key[1],
        "fp": best_key[2],
    }
    return best_policy, report


# -- operating curve ----------------------------------------------------------------


@dataclass(frozen=True)
class OperatingPoint:
    frac_to_radiologist: float
    fnr: float
    fpr: float
    kappa: float
    f1: float
    counts: ConfusionCounts


def _nan_safe(fn, counts: ConfusionCounts) -> float:
    try:
        return fn(counts)
    except ValueError:
        return float("nan")


def operating_curve(policy: TriagePolicy, data: TriageData) -> list[OperatingPoint]:
    """One operating point per alpha cut, beta fixed by the policy.

    Alphas sweep the distinct triage scores plus {0,1} from high to low, so
    the fraction sent to the radiologist is non-decreasing along the list;
    the first point is machine-only, the last radiologist-only.
    """
    w = policy.net.forward_batch(data.x)
    y = data.outcome.astype(int)
    rad = data.rad_pred.astype(int)
    clf = (data.clf_prob >= policy.beta).astype(int)
    points = []
    for alpha in np.unique(np.concatenate([w, [0.0, 1.0]]))[::-1]:
        to_rad = w >= alpha
        pred = np.where(to_rad, rad, clf)
        counts = ConfusionCounts(
            tp=int(np.sum((pred == 1) & (y == 1))),
            tn=int(np.sum((pred == 0) & (y == 0))),
            fp=int(np.sum((pred == 1) & (y == 0))),
            fn=int(np.sum((pred == 0) & (y == 1))),
        )
        n_pos = counts.tp + counts.fn
        n_neg = counts.tn + counts.fp
        points.append(
            OperatingPoint(
                frac_to_radiologist=float(np.mean(to_rad)),
                fnr=counts.fn / n_pos if n_pos else float("nan"),
                fpr=counts.fp / n_neg if n_neg else float("nan"),
                kappa=_nan_safe(cohen_kappa, counts),
                f1=_nan_safe(f1_score, counts),
                counts=counts,
            )
        )
    return points


def curve_to_csv(points: list[OperatingPoint]) -> str:
    from .cohort import fmt6

    lines = ["frac_to_radiologist,fnr,fpr,kappa,f1,tp,tn,fp,fn"]
    for p in points:
        c = p.counts
        lines.append(
            ",".join(
                [fmt6(p.frac_to_radiologist), fmt6(p.fnr), fmt6(p.fpr), fmt6(p.kappa), fmt6(p.f1)]
                + [str(v) for v in (c.tp, c.tn, c.fp, c.fn)]
            )
        )
    return "\n".join(lines) + "\n"


# -- persistence --------------------------------------------------------------------

POLICY_FORMAT_VERSION = 1


def save_policy(path, policy: TriagePolicy, val_metrics: dict | None = None) -> None:
    doc = {
        "format_version": POLICY_FORMAT_VERSION,
        "kind": "triage_policy",
        "net": policy.net.to_jsonable(),
        "alpha": policy.alpha,
        "beta": policy.beta,
        "b_R": policy.b_r,
        "b_C": policy.b_c,
        "feasible_flag": "ok" if policy.feasible else "constraint_bound",
        "val_metrics": val_metrics or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_policy(path) -> tuple[TriagePolicy, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != POLICY_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported policy format version")
    if doc.get("kind") != "triage_policy":
        raise ValueError(f"{path}: not a triage policy document")
    policy = TriagePolicy(
        net=TriageNet.from_jsonable(doc["net"]),
        alpha=float(doc["alpha"]),
        beta=float(doc["beta"]),
        b_r=float(doc["b_R"]),
        b_c=float(doc["b_C"]),
        feasible=doc.get("feasible_flag") == "ok",
    )
    return policy, doc
