"""Synthetic cohort engine.

Generates phantom view images whose radiological labels are true by
construction, simulates a radiologist with configurable per-stratum error
rates, assembles cohorts matching configured population strata, partitions
them into training stages, and round-trips everything through CSV + PGM.

Determinism: every patient gets an independent RNG stream derived from the
cohort seed via `netcore.mix_seed` (splitmix64) keyed on (purpose, patient
index, view index). Generation order and thread scheduling cannot change
any output.

Units: age in years on [40, 73]; density as a percentage on a 0-100 visual
analogue scale; images are (52, 40) float arrays in [0, 1] (width:height
1:1.3).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .imaging import read_pgm, write_pgm
from .netcore import mix_seed

__all__ = [
    "SIGNS",
    "RECALL_TYPES",
    "AGE_RANGE",
    "IMAGE_SHAPE",
    "VIEW_NAMES",
    "COHORT_HEADER",
    "PhantomSpec",
    "PatientRecord",
    "ReaderProfile",
    "StrataConfig",
    "SplitSpec",
    "Partition",
    "default_strata",
    "default_reader_profile",
    "generate_phantom",
    "suspicion_rule",
    "simulate_radiologist",
    "sample_attributes",
    "generate_cohort",
    "partition",
    "save_cohort",
    "load_cohort",
    "fmt6",
]

SIGNS = ("none", "circumscribed", "spiculated", "micro-calcification", "distortion", "asymmetrical-density")
SUSPICION_LEVELS = 5  # normal, benign, probably benign, suspicious, malignant
CONSPICUITY_LEVELS = 4  # not visible, barely visible, visible not clear, clearly visible
RECALL_TYPES = ("one-reader", "two-readers", "arbitration")
AGE_RANGE = (40.0, 73.0)
IMAGE_SHAPE = (52, 40)  # (height, width), 1:1.3 width:height
VIEW_NAMES = ("mlo_r", "mlo_l", "cc_r", "cc_l")

COHORT_HEADER = (
    "id,age,family_history,recall_type,"
    "density_mlo_r,density_mlo_l,density_cc_r,density_cc_l,"
    "sign,suspicion,conspicuity,outcome,rad_diagnosis,"
    "img_mlo_r,img_mlo_l,img_cc_r,img_cc_l"
)


def fmt6(x: float) -> str:
    """Canonical float serialization: 6 significant digits."""
    return "%.6g" % float(x)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class PhantomSpec:
    """One view of one breast: tissue density plus an optional lesion."""

    density: float  # VAS percent in [0, 100]
    sign: str  # one of SIGNS; "none" draws no lesion
    conspicuity: int  # 0..3; scales lesion contrast monotonically
    malignant: bool
    asymmetry: float = 0.0  # cross-view density spread this view was drawn with
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.density <= 100.0:
            raise ValueError("density must be in [0, 100]")
        if self.sign not in SIGNS:
            raise ValueError(f"unknown sign {self.sign!r}")
        if not 0 <= self.conspicuity < CONSPICUITY_LEVELS:
            raise ValueError("conspicuity must be in 0..3")
        if self.asymmetry < 0:
            raise ValueError("asymmetry must be >= 0")


@dataclass
class PatientRecord:
    """Stored patient: reader annotations, outcome, reader diagnosis, 4 views.

    views are in canonical order MLO-R, MLO-L, CC-R, CC-L. The categorical
    annotations (sign, suspicion, conspicuity) are patient-level reads;
    density is annotated per view.
    """

    id: int
    age: float
    family_history: int
    recall_type: str
    densities: tuple[float, float, float, float]
    sign: str
    suspicion: int
    conspicuity: int
    outcome: int
    rad_diagnosis: int
    images: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None
    image_paths: tuple[str, str, str, str] | None = None

    def __post_init__(self) -> None:
        if self.recall_type not in RECALL_TYPES:
            raise ValueError(f"unknown recall type {self.recall_type!r}")
        if self.sign not in SIGNS:
            raise ValueError(f"unknown sign {self.sign!r}")
        if any(not 0.0 <= d <= 100.0 for d in self.densities):
            raise ValueError("densities must be in [0, 100]")
        if self.images is not None and len(self.images) != 4:
            raise ValueError("exactly 4 views required")


@dataclass(frozen=True)
class ReaderProfile:
    """Per-stratum radiologist error rates, keyed (conspicuity, density_bin, family_history)."""

    fnr: dict[tuple[int, int, int], float]
    fpr: dict[tuple[int, int, int], float]
    density_bins: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        for table in (self.fnr, self.fpr):
            for key, rate in table.items():
                if not 0.0 <= rate <= 1.0:
                    raise ValueError(f"rate out of [0,1] at stratum {key}")

    def density_bin(self, density: float) -> int:
        for b, (lo, hi) in enumerate(self.density_bins):
            if lo <= density < hi or (b == len(self.density_bins) - 1 and density == hi):
                return b
        raise ValueError(f"density {density} outside configured bins")


@dataclass(frozen=True)
class StrataConfig:
    """Outcome-conditional population distributions the sampler must realize."""

    prevalence: float
    age_bins: tuple[tuple[float, float], ...]
    age_given_cancer: tuple[float, ...]
    age_given_benign: tuple[float, ...]
    density_bins: tuple[tuple[float, float], ...]
    density_given_cancer: tuple[float, ...]
    density_given_benign: tuple[float, ...]
    sign_given_cancer: tuple[float, ...]
    sign_given_benign: tuple[float, ...]
    conspicuity_given_cancer: tuple[float, ...]
    conspicuity_given_benign: tuple[float, ...]
    family_history_rate: float
    recall_probs: tuple[float, float, float]
    malignant_density_spread: float = 15.0
    benign_density_spread: float = 3.0

    def __post_init__(self) -> None:
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be in (0, 1)")
        pairs = [
            ("age_given_cancer", self.age_given_cancer, len(self.age_bins)),
            ("age_given_benign", self.age_given_benign, len(self.age_bins)),
            ("density_given_cancer", self.density_given_cancer, len(self.density_bins)),
            ("density_given_benign", self.density_given_benign, len(self.density_bins)),
            ("sign_given_cancer", self.sign_given_cancer, len(SIGNS)),
            ("sign_given_benign", self.sign_given_benign, len(SIGNS)),
            ("conspicuity_given_cancer", self.conspicuity_given_cancer, CONSPICUITY_LEVELS),
            ("conspicuity_given_benign", self.conspicuity_given_benign, CONSPICUITY_LEVELS),
            ("recall_probs", self.recall_probs, len(RECALL_TYPES)),
        ]
        for name, probs, expect in pairs:
            if len(probs) != expect:
                raise ValueError(f"{name} needs {expect} entries")
            if any(p < 0 for p in probs):
                raise ValueError(f"{name} has negative entries")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1, got {sum(probs)}")
        if not 0.0 <= self.family_history_rate <= 1.0:
            raise ValueError("family_history_rate must be in [0, 1]")


@dataclass(frozen=True)
class SplitSpec:
    """Stage fractions over the non-holdout patients, plus the held-out test size."""

    fractions: tuple[float, float, float, float] = (0.60, 0.15, 0.15, 0.10)
    holdout: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")
        if any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be >= 0")
        if self.holdout < 0:
            raise ValueError("holdout must be >= 0")


@dataclass(frozen=True)
class Partition:
    """Disjoint sorted index arrays covering the cohort."""

    stage1: np.ndarray
    stage2: np.ndarray
    stage3: np.ndarray
    validation: np.ndarray
    holdout: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return {
            "stage1": self.stage1,
            "stage2": self.stage2,
            "stage3": self.stage3,
            "validation": self.validation,
            "holdout": self.holdout,
        }


# ---------------------------------------------------------------------------
# Defaults


def _benign_from_total(total, cancer, prevalence):
    out = []
    for t, c in zip(total, cancer):
        b = (t - prevalence * c) / (1.0 - prevalence)
        if b < -1e-9:
            raise ValueError("total/cancer columns inconsistent with prevalence")
        out.append(max(b, 0.0))
    s = sum(out)
    return tuple(v / s for v in out)


def default_strata() -> StrataConfig:
    """Published-cohort-shaped defaults: 8162 patients, 1677 malignant.

    Totals and cancer-conditional columns are the published participant
    characteristics; benign-conditional columns are derived so the overall
    marginals match the totals at the configured prevalence.
    """
    prevalence = 1677 / 8162
    age_total = (0.06, 0.59, 0.29, 0.06)
    age_cancer = (0.03, 0.40, 0.45, 0.12)
    density_total = (0.27, 0.43, 0.23, 0.07)
    density_cancer = (0.33, 0.38, 0.24, 0.05)
    finding_total = (0.31, 0.13, 0.17, 0.08, 0.31)
    finding_cancer = (0.14, 0.44, 0.24, 0.09, 0.09)
    benign_findings = _benign_from_total(finding_total, finding_cancer, prevalence)
    # Benign patients can present without any radiological sign.
    benign_none = 0.35
    sign_benign = (benign_none,) + tuple(0.65 * p for p in benign_findings)
    sign_cancer = (0.0,) + finding_cancer
    return StrataConfig(
        prevalence=prevalence,
        age_bins=((40.0, 50.0), (50.0, 60.0), (60.0, 70.0), (70.0, 73.0)),
        age_given_cancer=age_cancer,
        age_given_benign=_benign_from_total(age_total, age_cancer, prevalence),
        density_bins=((0.0, 25.0), (25.0, 50.0), (50.0, 75.0), (75.0, 100.0)),
        density_given_cancer=density_cancer,
        density_given_benign=_benign_from_total(density_total, density_cancer, prevalence),
        sign_given_cancer=sign_cancer,
        sign_given_benign=sign_benign,
        conspicuity_given_cancer=(0.08, 0.22, 0.30, 0.40),
        conspicuity_given_benign=(0.30, 0.30, 0.25, 0.15),
        family_history_rate=0.164,
        recall_probs=(0.261, 0.615, 0.124),
    )


# Base aggregate reader rates: FNR 36/156, FPR 42/844.
_BASE_FNR = 36 / 156
_BASE_FPR = 42 / 844
# Pre-normalization stratum multipliers.
_FNR_BY_CONSP = (1.5, 1.2, 0.8, 0.5)  # invisible cancers get missed more
_FPR_BY_CONSP = (0.5, 0.8, 1.2, 1.5)  # conspicuous benign findings draw recalls
_FNR_BY_DENSITY = (0.9, 1.0, 1.1, 1.2)  # dense tissue hides cancers
_FPR_BY_DENSITY = (0.9, 1.0, 1.1, 1.2)
_FNR_BY_FH = (1.0, 1.0)
_FPR_BY_FH = (1.0, 1.3)  # family history lowers the recall bar


def _normalized(mult, probs):
    mean = sum(m * p for m, p in zip(mult, probs))
    return tuple(m / mean for m in mult)


def default_reader_profile(strata: StrataConfig | None = None) -> ReaderProfile:
    """Reader whose aggregate rates hit the base FNR/FPR in expectation.

    Each multiplier table is normalized to mean 1 under the corresponding
    outcome-conditional stratum distribution; the three key dimensions are
    sampled independently given the outcome, so the product has mean 1 and
    the aggregate rates equal the base rates exactly in expectation.
    """
    strata = strata or default_strata()
    fh = (1.0 - strata.family_history_rate, strata.family_history_rate)
    fnr_c = _normalized(_FNR_BY_CONSP, strata.conspicuity_given_cancer)
    fnr_d = _normalized(_FNR_BY_DENSITY, strata.density_given_cancer)
    fnr_f = _normalized(_FNR_BY_FH, fh)
    fpr_c = _normalized(_FPR_BY_CONSP, strata.conspicuity_given_benign)
    fpr_d = _normalized(_FPR_BY_DENSITY, strata.density_given_benign)
    fpr_f = _normalized(_FPR_BY_FH, fh)
    fnr_table: dict[tuple[int, int, int], float] = {}
    fpr_table: dict[tuple[int, int, int], float] = {}
    for c in range(CONSPICUITY_LEVELS):
        for d in range(len(strata.density_bins)):
            for f in (0, 1):
                fnr_table[(c, d, f)] = min(1.0, _BASE_FNR * fnr_c[c] * fnr_d[d] * fnr_f[f])
                fpr_table[(c, d, f)] = min(1.0, _BASE_FPR * fpr_c[c] * fpr_d[d] * fpr_f[f])
    return ReaderProfile(fnr=fnr_table, fpr=fpr_table, density_bins=strata.density_bins)


# ---------------------------------------------------------------------------
# Phantom rendering

_CONTRAST_BY_CONSPICUITY = (0.05, 0.15, 0.28, 0.42)
# Focal lesions render as plateaus pulled toward these intensity levels, so a
# grade-0 finding hides inside the tissue band (masked by dense breasts) while
# a grade-3 finding saturates well above anything texture or streaks produce.
# Calcifications are the brightest structures on film; circumscribed masses
# the dimmest. The per-sign offset keeps that ordering at every grade.
_LEVEL_BY_CONSPICUITY = (0.60, 0.68, 0.80, 0.95)
_LEVEL_OFFSET_BY_SIGN = {
    "micro-calcification": 0.04,
    "spiculated": 0.02,
    "distortion": -0.02,
    "circumscribed": -0.04,
}
_BRIGHT, _DARK = 0.58, 0.42


def _smooth_field(rng: np.random.Generator, h: int, w: int, ch: int = 13, cw: int = 10) -> np.ndarray:
    """Bilinearly upsampled coarse noise: spatially coherent tissue texture."""
    coarse = rng.uniform(size=(ch, cw))
    ys = np.linspace(0.0, ch - 1.0, h)
    xs = np.linspace(0.0, cw - 1.0, w)
    y0 = np.minimum(ys.astype(int), ch - 2)
    x0 = np.minimum(xs.astype(int), cw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0[:, None], x0[None, :]]
    b = coarse[y0[:, None], x0[None, :] + 1]
    c = coarse[y0[:, None] + 1, x0[None, :]]
    d = coarse[y0[:, None] + 1, x0[None, :] + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _rank_uniform(field: np.ndarray) -> np.ndarray:
    """Map values to exact uniform ranks in [0, 1] (ties broken by position)."""
    flat = field.ravel()
    ranks = np.empty_like(flat)
    ranks[np.argsort(flat, kind="stable")] = np.arange(flat.size)
    return (ranks / (flat.size - 1)).reshape(field.shape)


def _dist_to_segment(gy, gx, p0, p1):
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = vy * vy + vx * vx
    if norm2 == 0:
        return np.hypot(gy - p0[0], gx - p0[1])
    t = np.clip(((gy - p0[0]) * vy + (gx - p0[1]) * vx) / norm2, 0.0, 1.0)
    return np.hypot(gy - (p0[0] + t * vy), gx - (p0[1] + t * vx))


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render one view; returns (image in [0,1], boolean lesion mask).

    Density controls the bright-tissue fraction monotonically; the sign
    category picks the lesion shape (blob, star, dot cluster, warp,
    one-sided brightening); conspicuity scales lesion contrast. Faint
    crossing streaks (overlapping-tissue confounder) appear at random in
    any view.
    """
    h, w = IMAGE_SHAPE
    rng = np.random.default_rng(spec.seed)
    u = _rank_uniform(_smooth_field(rng, h, w))
    # Soft threshold at the density quantile keeps the bright fraction exact
    # and the transition smooth.
    blend = 1.0 / (1.0 + np.exp(-(spec.density / 100.0 - u) / 0.02))
    img = _DARK + (_BRIGHT - _DARK) * blend
    img = img + 0.02 * rng.standard_normal((h, w))

    gy, gx = np.mgrid[0:h, 0:w].astype(float)
    mask = np.zeros((h, w), dtype=bool)
    contrast = _CONTRAST_BY_CONSPICUITY[spec.conspicuity]

    # Overlapping-tissue confounder: 2 faint streaks crossing the breast,
    # present in ~35% of views regardless of the lesion.
    if rng.uniform() < 0.35:
        for _ in range(2):
            cy0 = rng.uniform(0, h)
            cx0 = rng.uniform(0, w)
            ang = rng.uniform(0, math.pi)
            length = rng.uniform(18, 34)
            p0 = (cy0 - math.sin(ang) * length / 2, cx0 - math.cos(ang) * length / 2)
            p1 = (cy0 + math.sin(ang) * length / 2, cx0 + math.cos(ang) * length / 2)
            d = _dist_to_segment(gy, gx, p0, p1)
            img += rng.uniform(0.03, 0.06) * np.clip(1.0 - d / 1.4, 0.0, 1.0)

    if spec.sign != "none":
        level = min(
            1.0, _LEVEL_BY_CONSPICUITY[spec.conspicuity] + _LEVEL_OFFSET_BY_SIGN.get(spec.sign, 0.0)
        )
        # Footprint grows with conspicuity. Contrast stretching at read time
        # rescales intensities tile by tile, so the area of the coherent
        # structure is the one magnitude cue that always survives.
        g = spec.conspicuity
        # Focal findings cluster in the central fibroglandular disk rather
        # than spreading uniformly to the margins.
        cy = float(np.clip(h / 2 + rng.normal(0.0, h / 6.0), 12, h - 12))
        cx = float(np.clip(w / 2 + rng.normal(0.0, w / 6.0), 10, w - 10))
        dist = np.hypot(gy - cy, gx - cx)
        if spec.sign == "circumscribed":
            strength = np.clip((3.5 + 1.2 * g - dist) / 1.0, 0.0, 1.0)
            img = np.maximum(img, level * strength)
            mask = strength > 0.05
        elif spec.sign == "spiculated":
            core = np.clip((2.5 + 0.5 * g - dist) / 0.8, 0.0, 1.0)
            strength = core.copy()
            arm = 6.0 + 2.0 * g
            for k in range(12):
                ang = 2 * math.pi * k / 12 + rng.uniform(-0.2, 0.2)
                tip = (cy + math.sin(ang) * arm, cx + math.cos(ang) * arm)
                d = _dist_to_segment(gy, gx, (cy, cx), tip)
                strength = np.maximum(strength, 0.95 * np.clip(1.0 - d / 1.0, 0.0, 1.0))
            img = np.maximum(img, level * strength)
            mask = strength > 0.05
        elif spec.sign == "micro-calcification":
            strength = np.zeros((h, w))
            spread = 5.0 + 1.5 * g
            for _ in range(int(rng.integers(6, 10)) + 4 * g):
                dy = rng.uniform(-spread, spread)
                dx = rng.uniform(-spread, spread)
                r = rng.uniform(0.7, 1.2)
                d = np.hypot(gy - (cy + dy), gx - (cx + dx))
                strength = np.maximum(strength, np.clip((r - d) / 0.3, 0.0, 1.0))
            img = np.maximum(img, level * strength)
            mask = strength > 0.05
        elif spec.sign == "distortion":
            radius = 7.0 + 1.5 * g
            angle = 4.0 * contrast * np.clip(1.0 - dist / radius, 0.0, 1.0)
            cos_a, sin_a = np.cos(angle), np.sin(angle)
            sy = cy + sin_a * (gx - cx) + cos_a * (gy - cy)
            sx = cx + cos_a * (gx - cx) - sin_a * (gy - cy)
            y0i = np.clip(np.floor(sy).astype(int), 0, h - 2)
            x0i = np.clip(np.floor(sx).astype(int), 0, w - 2)
            fy = np.clip(sy - y0i, 0.0, 1.0)
            fx = np.clip(sx - x0i, 0.0, 1.0)
            warped = (
                (1 - fy) * (1 - fx) * img[y0i, x0i]
                + (1 - fy) * fx * img[y0i, x0i + 1]
                + fy * (1 - fx) * img[y0i + 1, x0i]
                + fy * fx * img[y0i + 1, x0i + 1]
            )
            inside = dist < radius
            img = np.where(inside, warped, img)
            # Ridge ring so the warp also leaves an intensity trace.
            ridge = np.clip(1.0 - np.abs(dist - radius / 2) / 2.0, 0.0, 1.0)
            img = np.maximum(img, 0.92 * level * ridge)
            mask = inside
        elif spec.sign == "asymmetrical-density":
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            ramp = 1.0 / (1.0 + np.exp(-side * (gx - cx) / 4.0))
            # Brighter and coarser on the dense side; the extra mottle keeps
            # the asymmetry readable after local contrast normalization.
            img += contrast * ramp * (0.9 + 0.5 * rng.standard_normal((h, w)))
            mask = ramp > 0.5
        if spec.malignant:
            # Malignant findings carry heterogeneous internal structure and
            # ragged margins; benign ones fill homogeneously. Amplitude rides
            # the conspicuity contrast so occult cancers stay occult.
            carrier = ridge if spec.sign == "distortion" else (
                0.5 * ramp if spec.sign == "asymmetrical-density" else strength
            )
            speck = rng.uniform(-0.6, 1.0, size=(h, w))
            img += 0.45 * contrast * speck * carrier
    return np.clip(img, 0.0, 1.0), mask


# ---------------------------------------------------------------------------
# Simulated radiologist


def suspicion_rule(sign: str, conspicuity: int, outcome: int) -> int:
    """Deterministic monotone suspicion core, before reader noise.

    Malignant: 2 + (conspicuity >= 1) + (conspicuity >= 3)  -> 2..4
    Benign:    (sign != none) + (conspicuity >= 2)          -> 0..2
    """
    if outcome == 1:
        return 2 + (1 if conspicuity >= 1 else 0) + (1 if conspicuity >= 3 else 0)
    return (1 if sign != "none" else 0) + (1 if conspicuity >= 2 else 0)


@dataclass(frozen=True)
class Annotations:
    sign: str
    suspicion: int
    conspicuity: int
    densities: tuple[float, float, float, float]


def simulate_radiologist(
    truth: "PatientTruth", profile: ReaderProfile, seed: int
) -> tuple[int, Annotations]:
    """Reader's diagnosis plus noisy annotations for one patient.

    The diagnosis flips the true outcome with the stratum's FNR/FPR, the
    stratum keyed on the true conspicuity, true base-density bin, and
    family history. Categorical annotations are the ground truth with
    seeded label noise (sign resampled w.p. 0.1, conspicuity +-1 w.p. 0.2,
    suspicion rule value +-1 w.p. 0.2); densities get N(0, 2) reader noise.
    """
    rng = np.random.default_rng(seed)
    key = (truth.conspicuity, profile.density_bin(truth.base_density), truth.family_history)
    if key not in profile.fnr or key not in profile.fpr:
        raise ValueError(f"unknown stratum {key}")
    if truth.outcome == 1:
        rad = 0 if rng.uniform() < profile.fnr[key] else 1
    else:
        rad = 1 if rng.uniform() < profile.fpr[key] else 0

    sign = truth.sign
    if rng.uniform() < 0.1:
        others = [s for s in SIGNS if s != sign]
        sign = others[int(rng.integers(0, len(others)))]
    consp = truth.conspicuity
    if rng.uniform() < 0.2:
        consp = int(np.clip(consp + (1 if rng.uniform() < 0.5 else -1), 0, CONSPICUITY_LEVELS - 1))
    susp = suspicion_rule(truth.sign, truth.conspicuity, truth.outcome)
    if rng.uniform() < 0.2:
        susp = int(np.clip(susp + (1 if rng.uniform() < 0.5 else -1), 0, SUSPICION_LEVELS - 1))
    densities = tuple(
        float(np.clip(d + rng.normal(0.0, 2.0), 0.0, 100.0)) for d in truth.view_densities
    )
    return rad, Annotations(sign=sign, suspicion=susp, conspicuity=consp, densities=densities)


# ---------------------------------------------------------------------------
# Cohort assembly


@dataclass(frozen=True)
class PatientTruth:
    """Ground-truth attributes drawn by the sampler, before reader noise."""

    index: int
    outcome: int
    age: float
    family_history: int
    recall_type: str
    sign: str
    conspicuity: int
    base_density: float
    view_densities: tuple[float, float, float, float]


def _draw_bin_values(rng, bins, probs, n):
    idx = rng.choice(len(bins), size=n, p=np.asarray(probs))
    lows = np.array([b[0] for b in bins])[idx]
    highs = np.array([b[1] for b in bins])[idx]
    return idx, lows + rng.uniform(size=n) * (highs - lows)


def sample_attributes(n: int, strata: StrataConfig, seed: int) -> list[PatientTruth]:
    """Draw ground-truth attributes for n patients (no images, no reader)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(mix_seed(seed, 1))
    outcome = (rng.uniform(size=n) < strata.prevalence).astype(int)
    mal = outcome == 1

    age = np.empty(n)
    base_density = np.empty(n)
    sign_idx = np.empty(n, dtype=int)
    consp = np.empty(n, dtype=int)
    for is_mal, rows in ((True, np.nonzero(mal)[0]), (False, np.nonzero(~mal)[0])):
        if rows.size == 0:
            continue
        a_probs = strata.age_given_cancer if is_mal else strata.age_given_benign
        d_probs = strata.density_given_cancer if is_mal else strata.density_given_benign
        s_probs = strata.sign_given_cancer if is_mal else strata.sign_given_benign
        c_probs = strata.conspicuity_given_cancer if is_mal else strata.conspicuity_given_benign
        _, age[rows] = _draw_bin_values(rng, strata.age_bins, a_probs, rows.size)
        _, base_density[rows] = _draw_bin_values(rng, strata.density_bins, d_probs, rows.size)
        sign_idx[rows] = rng.choice(len(SIGNS), size=rows.size, p=np.asarray(s_probs))
        consp[rows] = rng.choice(CONSPICUITY_LEVELS, size=rows.size, p=np.asarray(c_probs))

    fh = (rng.uniform(size=n) < strata.family_history_rate).astype(int)
    recall_idx = rng.choice(len(RECALL_TYPES), size=n, p=np.asarray(strata.recall_probs))
    spread = np.where(mal, strata.malignant_density_spread, strata.benign_density_spread)
    offsets = rng.uniform(-0.5, 0.5, size=(n, 4)) * spread[:, None]
    view_densities = np.clip(base_density[:, None] + offsets, 0.0, 100.0)

    return [
        PatientTruth(
            index=i,
            outcome=int(outcome[i]),
            age=float(age[i]),
            family_history=int(fh[i]),
            recall_type=RECALL_TYPES[recall_idx[i]],
            sign=SIGNS[sign_idx[i]],
            conspicuity=int(consp[i]),
            base_density=float(base_density[i]),
            view_densities=tuple(float(v) for v in view_densities[i]),
        )
        for i in range(n)
    ]


def render_views(truth: PatientTruth, cohort_seed: int) -> tuple[np.ndarray, ...]:
    """Render the 4 canonical views for one patient, one seed stream per view."""
    images = []
    for v, _ in enumerate(VIEW_NAMES):
        spec = PhantomSpec(
            density=truth.view_densities[v],
            sign=truth.sign,
            conspicuity=truth.conspicuity,
            malignant=bool(truth.outcome),
            asymmetry=abs(truth.view_densities[v] - truth.base_density),
            seed=mix_seed(cohort_seed, 2, truth.index, v),
        )
        images.append(generate_phantom(spec)[0])
    return tuple(images)


def generate_cohort(
    n: int,
    strata: StrataConfig | None = None,
    profile: ReaderProfile | None = None,
    seed: int = 0,
    render: bool = True,
) -> list[PatientRecord]:
    """Sample attributes, simulate the reader, render phantom views."""
    strata = strata or default_strata()
    profile = profile or default_reader_profile(strata)
    truths = sample_attributes(n, strata, seed)
    records = []
    for t in truths:
        rad, ann = simulate_radiologist(t, profile, mix_seed(seed, 3, t.index))
        images = render_views(t, seed) if render else None
        records.append(
            PatientRecord(
                id=t.index,
                age=t.age,
                family_history=t.family_history,
                recall_type=t.recall_type,
                densities=ann.densities,
                sign=ann.sign,
                suspicion=ann.suspicion,
                conspicuity=ann.conspicuity,
                outcome=t.outcome,
                rad_diagnosis=rad,
                images=images,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Partitioning


def partition(cohort_size: int, split: SplitSpec) -> Partition:
    """Holdout first, then stage fractions with floors; residue goes to stage1."""
    n = cohort_size
    if n <= split.holdout:
        raise ValueError(f"cohort of {n} too small for holdout {split.holdout}")
    rng = np.random.default_rng(split.seed)
    perm = rng.permutation(n)
    holdout = perm[: split.holdout]
    rest = perm[split.holdout :]
    m = rest.size
    sizes = [math.floor(f * m) for f in split.fractions]
    sizes[0] += m - sum(sizes)
    if any(s < 1 for s in sizes):
        raise ValueError(f"cohort of {n} too small for fractions {split.fractions}")
    bounds = np.cumsum([0] + sizes)
    parts = [rest[bounds[i] : bounds[i + 1]] for i in range(4)]
    return Partition(
        stage1=np.sort(parts[0]),
        stage2=np.sort(parts[1]),
        stage3=np.sort(parts[2]),
        validation=np.sort(parts[3]),
        holdout=np.sort(holdout),
    )


# ---------------------------------------------------------------------------
# CSV + PGM persistence


def save_cohort(records: list[PatientRecord], out_dir, image_dirname: str = "images") -> str:
    """Write cohort.csv plus one PGM per view; returns the CSV path."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, image_dirname)
    os.makedirs(img_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "cohort.csv")
    with open(csv_path, "w", newline="") as f:
        f.write(COHORT_HEADER + "\n")
        for rec in records:
            paths = []
            for v, view in enumerate(VIEW_NAMES):
                rel = f"{image_dirname}/p{rec.id:06d}_{view}.pgm"
                if rec.images is not None:
                    write_pgm(os.path.join(out_dir, rel), rec.images[v])
                elif rec.image_paths is None:
                    raise ValueError(f"patient {rec.id}: no images to save")
                paths.append(rel)
            row = [
                str(rec.id),
                fmt6(rec.age),
                str(rec.family_history),
                rec.recall_type,
                *[fmt6(d) for d in rec.densities],
                rec.sign,
                str(rec.suspicion),
                str(rec.conspicuity),
                str(rec.outcome),
                str(rec.rad_diagnosis),
                *paths,
            ]
            f.write(",".join(row) + "\n")
    return csv_path


def load_cohort(csv_path, load_images: bool = True) -> list[PatientRecord]:
    """Parse cohort.csv; images resolved relative to the CSV's directory."""
    import os

    base = os.path.dirname(os.path.abspath(csv_path))
    expected_cols = COHORT_HEADER.split(",")
    records = []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{csv_path}: empty file") from None
        missing = [c for c in expected_cols if c not in header]
        if missing:
            raise ValueError(f"{csv_path}: missing columns {missing}")
        col = {name: header.index(name) for name in expected_cols}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rel_paths = tuple(row[col[f"img_{v}"]] for v in VIEW_NAMES)
                images = None
                if load_images:
                    images = tuple(read_pgm(os.path.join(base, p)) for p in rel_paths)
                densities = tuple(float(row[col[f"density_{v}"]]) for v in VIEW_NAMES)
                rec = PatientRecord(
                    id=int(row[col["id"]]),
                    age=float(row[col["age"]]),
                    family_history=int(row[col["family_history"]]),
                    recall_type=row[col["recall_type"]],
                    densities=densities,
                    sign=row[col["sign"]],
                    suspicion=int(row[col["suspicion"]]),
                    conspicuity=int(row[col["conspicuity"]]),
                    outcome=int(row[col["outcome"]]),
                    rad_diagnosis=int(row[col["rad_diagnosis"]]),
                    images=images,
                    image_paths=rel_paths,
                )
            except (ValueError, IndexError, FileNotFoundError) as exc:
                if isinstance(exc, FileNotFoundError):
                    raise ValueError(f"{csv_path} row {line_no}: missing image file {exc.filename}") from exc
                raise ValueError(f"{csv_path} row {line_no}: {exc}") from exc
            if int(rec.suspicion) not in range(SUSPICION_LEVELS):
                raise ValueError(f"{csv_path} row {line_no}: suspicion out of range")
            if int(rec.conspicuity) not in range(CONSPICUITY_LEVELS):
                raise ValueError(f"{csv_path} row {line_no}: conspicuity out of range")
            records.append(rec)
    return records
