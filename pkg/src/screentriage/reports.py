"""Stratified report tables and SVG figure emitters.

Tables are lists of row dicts rendered through one CSV emitter so the
artifacts stay diffable: floats at 6 significant digits, counts as plain
integers, omitted strata recorded as trailing comment lines.
"""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .cohort import RECALL_TYPES, SIGNS, PatientRecord, fmt6
from .fusion import density_variance
from .metrics import ConfusionCounts, cohen_kappa, f1_score
from .mtlnet import Mto, denormalize_age
from .triage import OperatingPoint, TriageData, TriagePolicy

__all__ = [
    "DENSITY_CUT",
    "CONSPICUITY_CUT",
    "SUSPICION_CUT",
    "StratifiedReport",
    "stratify",
    "agreement_table",
    "workload_table",
    "comparison_table",
    "density_variance_table",
    "table_to_csv",
    "plot_operating_curve",
    "plot_saliency",
]

# Binary splits for the stratified tables. Conspicuity 0..3 splits between
# "barely visible" and "visible not clear"; suspicion 0..4 puts only the top
# two grades in the high bucket; density splits at half the 0-100 scale.
CONSPICUITY_CUT = 2
SUSPICION_CUT = 3
DENSITY_CUT = 50.0


def stratify(records: Sequence[PatientRecord], age_cut: float | None = None) -> dict[str, np.ndarray]:
    """Ordered map of stratum name -> indices into records.

    Strata overlap (every patient is in "all" plus one row per annotation
    axis). The age split defaults to the mean age of the records given.
    """
    if len(records) == 0:
        raise ValueError("no records to stratify")
    ages = np.array([r.age for r in records])
    if age_cut is None:
        age_cut = float(ages.mean())
    consp = np.array([r.conspicuity for r in records])
    susp = np.array([r.suspicion for r in records])
    dens = np.array([float(np.mean(r.densities)) for r in records])
    fh = np.array([r.family_history for r in records])
    sign = np.array([r.sign for r in records])
    recall = np.array([r.recall_type for r in records])

    strata: dict[str, np.ndarray] = {"all": np.arange(len(records))}
    strata["conspicuity_high"] = np.flatnonzero(consp >= CONSPICUITY_CUT)
    strata["conspicuity_low"] = np.flatnonzero(consp < CONSPICUITY_CUT)
    for s in SIGNS:
        strata[f"sign_{s}"] = np.flatnonzero(sign == s)
    strata["suspicion_high"] = np.flatnonzero(susp >= SUSPICION_CUT)
    strata["suspicion_low"] = np.flatnonzero(susp < SUSPICION_CUT)
    strata["density_high"] = np.flatnonzero(dens >= DENSITY_CUT)
    strata["density_low"] = np.flatnonzero(dens < DENSITY_CUT)
    strata["family_history"] = np.flatnonzero(fh == 1)
    strata["no_family_history"] = np.flatnonzero(fh == 0)
    strata["age_over_mean"] = np.flatnonzero(ages >= age_cut)
    strata["age_under_mean"] = np.flatnonzero(ages < age_cut)
    for t in RECALL_TYPES:
        strata[f"recall_{t}"] = np.flatnonzero(recall == t)
    return strata


@dataclass
class StratifiedReport:
    """Rows keyed by population stratum plus notes for omitted strata."""

    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def row(self, stratum: str) -> dict:
        for r in self.rows:
            if r["stratum"] == stratum:
                return r
        raise KeyError(stratum)

    def to_csv(self) -> str:
        return table_to_csv(("stratum",) + self.columns, self.rows, self.notes)


def _format_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt6(v)


def table_to_csv(columns: Sequence[str], rows: Sequence[Mapping], notes: Sequence[str] = ()) -> str:
    """Render rows to CSV text; notes become trailing '#' comment lines."""
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_format_cell(r[c]) for c in columns))
    for note in notes:
        lines.append(f"# {note}")
    return "\n".join(lines) + "\n"


def _metric_or_nan(fn, counts: ConfusionCounts) -> float:
    # degenerate strata (no positives, unanimous marginals) print as nan
    try:
        return fn(counts)
    except ValueError:
        return float("nan")


def _counts(pred: np.ndarray, outcome: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(int)
    y = np.asarray(outcome).astype(int)
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (y == 1))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fp=int(np.sum((pred == 1) & (y == 0))),
        fn=int(np.sum((pred == 0) & (y == 1))),
    )


def agreement_table(
    records: Sequence[PatientRecord],
    rad_pred: np.ndarray,
    clf_prob: np.ndarray,
    threshold: float = 0.5,
) -> StratifiedReport:
    """Per-stratum fractions of the four correctness-agreement cells.

    A cell counts patients by whether the radiologist's diagnosis and the
    thresholded machine diagnosis each match the outcome, so the columns
    read: both correct, radiologist only, machine only, both wrong. The
    four fractions sum to 1 in every emitted row.
    """
    rad_pred = np.asarray(rad_pred).astype(int)
    clf_prob = np.asarray(clf_prob, dtype=float)
    if len(records) != rad_pred.size or len(records) != clf_prob.size:
        raise ValueError("records and predictions disagree in length")
    outcome = np.array([r.outcome for r in records])
    rad_ok = rad_pred == outcome
    clf_ok = (clf_prob >= threshold).astype(int) == outcome

    report = StratifiedReport(
        columns=(
            "n",
            "rad_correct_clf_correct",
            "rad_correct_clf_wrong",
            "rad_wrong_clf_correct",
            "rad_wrong_clf_wrong",
        )
    )
    for name, idx in stratify(records).items():
        if idx.size == 0:
            report.notes.append(f"stratum {name} omitted (empty)")
            continue
        r, c = rad_ok[idx], clf_ok[idx]
        cells = np.array(
            [np.sum(r & c), np.sum(r & ~c), np.sum(~r & c), np.sum(~r & ~c)], dtype=float
        )
        frac = cells / idx.size
        assert abs(frac.sum() - 1.0) < 1e-9
        report.rows.append(
            {
                "stratum": name,
                "n": int(idx.size),
                "rad_correct_clf_correct": frac[0],
                "rad_correct_clf_wrong": frac[1],
                "rad_wrong_clf_correct": frac[2],
                "rad_wrong_clf_wrong": frac[3],
            }
        )
    return report


def workload_table(
    policy: TriagePolicy, records: Sequence[PatientRecord], data: TriageData
) -> StratifiedReport:
    """Per-stratum workload and agreement-with-outcome for the combined system.

    Each row recomputes kappa and F1 from its own confusion counts, once for
    the radiologist reading everyone and once for the routed system.
    """
    if len(records) != data.x.shape[0]:
        raise ValueError("records and triage data disagree in length")
    w = policy.net.forward_batch(data.x)
    to_rad = w >= policy.alpha
    sys_pred = np.where(to_rad, data.rad_pred.astype(int), (data.clf_prob >= policy.beta).astype(int))
    outcome = data.outcome.astype(int)

    report = StratifiedReport(
        columns=("n", "frac_to_radiologist", "rad_kappa", "rad_f1", "system_kappa", "system_f1")
    )
    for name, idx in stratify(records).items():
        if idx.size == 0:
            report.notes.append(f"stratum {name} omitted (empty)")
            continue
        rad_c = _counts(data.rad_pred[idx], outcome[idx])
        sys_c = _counts(sys_pred[idx], outcome[idx])
        report.rows.append(
            {
                "stratum": name,
                "n": int(idx.size),
                "frac_to_radiologist": float(np.mean(to_rad[idx])),
                "rad_kappa": _metric_or_nan(cohen_kappa, rad_c),
                "rad_f1": _metric_or_nan(f1_score, rad_c),
                "system_kappa": _metric_or_nan(cohen_kappa, sys_c),
                "system_f1": _metric_or_nan(f1_score, sys_c),
            }
        )
    return report


COMPARISON_COLUMNS = (
    "policy",
    "n_radiologist",
    "n_classifier",
    "kappa",
    "f1",
    "tp",
    "tn",
    "fp",
    "fn",
)


def _comparison_row(name: str, n_rad, n_clf, counts: ConfusionCounts) -> dict:
    return {
        "policy": name,
        "n_radiologist": n_rad,
        "n_classifier": n_clf,
        "kappa": _metric_or_nan(cohen_kappa, counts),
        "f1": _metric_or_nan(f1_score, counts),
        "tp": counts.tp,
        "tn": counts.tn,
        "fp": counts.fp,
        "fn": counts.fn,
    }


def comparison_table(
    policy: TriagePolicy, data: TriageData, n_random: int = 100, seed: int = 0
) -> list[dict]:
    """Radiologist-only, machine-only, random split, and routed system rows.

    The random-split row matches the system's workload: each draw sends the
    same number of uniformly chosen patients to the radiologist and the rest
    to the machine at the policy threshold; metrics and counts are averaged
    over the draws.
    """
    n = data.x.shape[0]
    outcome = data.outcome.astype(int)
    rad_pred = data.rad_pred.astype(int)
    clf_pred = (data.clf_prob >= policy.beta).astype(int)

    w = policy.net.forward_batch(data.x)
    to_rad = w >= policy.alpha
    n_rad = int(to_rad.sum())
    sys_pred = np.where(to_rad, rad_pred, clf_pred)

    rows = [
        _comparison_row("radiologist", n, 0, _counts(rad_pred, outcome)),
        _comparison_row("classifier", 0, n, _counts(clf_pred, outcome)),
    ]

    rng = np.random.default_rng(seed)
    kappas, f1s = [], []
    count_sum = np.zeros(4)
    for _ in range(n_random):
        pick = rng.permutation(n)[:n_rad]
        mask = np.zeros(n, dtype=bool)
        mask[pick] = True
        pred = np.where(mask, rad_pred, clf_pred)
        c = _counts(pred, outcome)
        kappas.append(_metric_or_nan(cohen_kappa, c))
        f1s.append(_metric_or_nan(f1_score, c))
        count_sum += (c.tp, c.tn, c.fp, c.fn)
    mean_counts = count_sum / n_random
    rows.append(
        {
            "policy": "random_split",
            "n_radiologist": n_rad,
            "n_classifier": n - n_rad,
            "kappa": float(np.nanmean(kappas)),
            "f1": float(np.nanmean(f1s)),
            # averaged counts, so fractional values are expected here
            "tp": float(mean_counts[0]),
            "tn": float(mean_counts[1]),
            "fp": float(mean_counts[2]),
            "fn": float(mean_counts[3]),
        }
    )
    rows.append(_comparison_row("system", n_rad, n - n_rad, _counts(sys_pred, outcome)))
    return rows


def density_variance_table(
    per_patient_mtos: Sequence[Sequence[Mto]],
    clf_prob: np.ndarray,
    threshold: float = 0.5,
) -> list[dict]:
    """Mean cross-view variance of predicted density (0-100 scale) and
    predicted age (years), split by the machine's diagnosis."""
    clf_prob = np.asarray(clf_prob, dtype=float)
    if len(per_patient_mtos) != clf_prob.size:
        raise ValueError("outputs and probabilities disagree in length")
    if len(per_patient_mtos) == 0:
        raise ValueError("no patients")
    dv = np.array([density_variance(mtos) for mtos in per_patient_mtos])
    av = np.array(
        [np.var([denormalize_age(m.age) for m in mtos]) for mtos in per_patient_mtos]
    )
    pos = clf_prob >= threshold

    def _row(name: str, mask: np.ndarray) -> dict:
        return {
            "population": name,
            "n": int(mask.sum()),
            "mean_density_variance": float(dv[mask].mean()) if mask.any() else float("nan"),
            "mean_age_variance": float(av[mask].mean()) if mask.any() else float("nan"),
        }

    return [
        _row("all", np.ones(clf_prob.size, dtype=bool)),
        _row("classifier_positive", pos),
        _row("classifier_negative", ~pos),
    ]


DENSITY_VARIANCE_COLUMNS = ("population", "n", "mean_density_variance", "mean_age_variance")


# -- SVG emitters --------------------------------------------------------------------
#
# Direct markup, no plotting dependency. All coordinates go through fmt6 so
# the byte output is a pure function of the inputs.

_SVG_HEAD = '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'


def _svg_text(x: float, y: float, s: str, anchor: str = "middle", size: int = 12, extra: str = "") -> str:
    return (
        f'<text x="{fmt6(x)}" y="{fmt6(y)}" font-family="sans-serif" font-size="{size}" '
        f'text-anchor="{anchor}"{extra}>{s}</text>'
    )


def plot_operating_curve(points: Sequence[OperatingPoint]) -> str:
    """Self-contained SVG of miss and false-alarm rates against the fraction
    of patients read by the radiologist. One polyline plus circle markers per
    rate; axes labeled; byte output deterministic per input."""
    if len(points) == 0:
        raise ValueError("empty curve")
    width, height = 640, 420
    ml, mr, mt, mb = 70, 20, 20, 55
    pw, ph = width - ml - mr, height - mt - mb

    fracs = np.array([p.frac_to_radiologist for p in points])
    series = (("fnr", "#c0392b", np.array([p.fnr for p in points])),
              ("fpr", "#2266aa", np.array([p.fpr for p in points])))
    ymax = max(float(max(s[2].max() for s in series)), 1e-6) * 1.1

    def sx(v: float) -> float:
        return ml + v * pw

    def sy(v: float) -> float:
        return mt + ph - (v / ymax) * ph

    parts = [_SVG_HEAD.format(w=width, h=height)]
    parts.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    # axes
    parts.append(
        f'<path d="M {fmt6(ml)} {fmt6(mt)} L {fmt6(ml)} {fmt6(mt + ph)} L {fmt6(ml + pw)} '
        f'{fmt6(mt + ph)}" fill="none" stroke="black" stroke-width="1"/>'
    )
    for i in range(5):
        fx = i / 4
        parts.append(
            f'<line x1="{fmt6(sx(fx))}" y1="{fmt6(mt + ph)}" x2="{fmt6(sx(fx))}" '
            f'y2="{fmt6(mt + ph + 4)}" stroke="black" stroke-width="1"/>'
        )
        parts.append(_svg_text(sx(fx), mt + ph + 18, fmt6(fx)))
        fy = ymax * i / 4
        parts.append(
            f'<line x1="{fmt6(ml - 4)}" y1="{fmt6(sy(fy))}" x2="{fmt6(ml)}" '
            f'y2="{fmt6(sy(fy))}" stroke="black" stroke-width="1"/>'
        )
        parts.append(_svg_text(ml - 8, sy(fy) + 4, fmt6(fy), anchor="end", size=11))
    parts.append(_svg_text(ml + pw / 2, height - 12, "fraction read by radiologist"))
    parts.append(
        _svg_text(16, mt + ph / 2, "error rate", extra=f' transform="rotate(-90 16 {fmt6(mt + ph / 2)})"')
    )
    for name, color, ys in series:
        pts = " ".join(f"{fmt6(sx(f))},{fmt6(sy(v))}" for f, v in zip(fracs, ys))
        parts.append(f'<polyline class="{name}" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for f, v in zip(fracs, ys):
            parts.append(
                f'<circle class="{name}-pt" cx="{fmt6(sx(f))}" cy="{fmt6(sy(v))}" r="3" fill="{color}"/>'
            )
    # legend, top right of the plot area
    for k, (name, color, _) in enumerate(series):
        ly = mt + 14 + 18 * k
        parts.append(
            f'<line x1="{fmt6(ml + pw - 90)}" y1="{fmt6(ly)}" x2="{fmt6(ml + pw - 64)}" '
            f'y2="{fmt6(ly)}" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(_svg_text(ml + pw - 58, ly + 4, name, anchor="start", size=11))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _gray_levels(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    return np.rint((image - lo) / span * 255.0).astype(int)


def plot_saliency(heatmap: np.ndarray, image: np.ndarray, scale: int = 6) -> str:
    """Two per-pixel panels: the view on the left, the perturbation-response
    map on the right on a dark-to-warm ramp. Rect-per-pixel markup keeps the
    bytes deterministic."""
    heatmap = np.asarray(heatmap, dtype=float)
    image = np.asarray(image, dtype=float)
    if heatmap.size == 0 or image.size == 0:
        raise ValueError("empty input")
    if heatmap.shape != image.shape or heatmap.ndim != 2:
        raise ValueError("heatmap and image must be equal 2-d shapes")
    h, w = image.shape
    gap = 2 * scale
    width = 2 * w * scale + gap
    height = h * scale + 20

    gray = _gray_levels(image)
    hmax = float(heatmap.max())
    heat = heatmap / hmax if hmax > 0 else np.zeros_like(heatmap)

    parts = [_SVG_HEAD.format(w=width, h=height)]
    parts.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="black"/>')
    for i in range(h):
        for j in range(w):
            g = gray[i, j]
            parts.append(
                f'<rect x="{j * scale}" y="{i * scale}" width="{scale}" height="{scale}" '
                f'fill="rgb({g},{g},{g})"/>'
            )
    xoff = w * scale + gap
    for i in range(h):
        for j in range(w):
            t = heat[i, j]
            r, g, b = int(round(255 * t)), int(round(96 * t)), int(round(64 * (1 - t)))
            parts.append(
                f'<rect x="{xoff + j * scale}" y="{i * scale}" width="{scale}" height="{scale}" '
                f'fill="rgb({r},{g},{b})"/>'
            )
    ty = h * scale + 14
    parts.append(_svg_text(w * scale / 2, ty, "view", size=11, extra=' fill="white"'))
    parts.append(_svg_text(xoff + w * scale / 2, ty, "response", size=11, extra=' fill="white"'))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
