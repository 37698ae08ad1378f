"""Patient-level classifier: fuse the four per-view outputs with
non-imaging features into one malignancy probability.

The fusion input is a fixed-order concatenation:

    [mlo_r (19) | mlo_l (19) | cc_r (19) | cc_l (19) | age_norm | family_history]

for a total of 78 features. The classifier is a dense softmax stack
trained only on the held-aside stage-2 split, with the per-view model
frozen; batches of 4 are class-balanced (2 malignant, 2 benign).

Also hosts two analyses that ride on the same nets: a perturbation
saliency map (occlude a patch, record how much the diagnosis moves) and
the cross-view density-variance score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .imaging import AugmentSpec, standardize
from .losses import FocalParams, focal_grad, focal_loss
from .metrics import auroc
from .mtlnet import MTO_SIZE, Mto, TrainSchedule, predict_tta
from .netcore import DenseStack, SgdMomentum, glorot_uniform, mix_seed, softmax_rows

__all__ = [
    "VIEW_ORDER",
    "FUSION_INPUT_SIZE",
    "FusionInput",
    "FusionArch",
    "FusionNet",
    "FusionSamples",
    "assemble",
    "classify",
    "balanced_batches",
    "build_fusion_samples",
    "train_fusion",
    "train_classifier",
    "classify_tta",
    "saliency",
    "density_variance",
]

VIEW_ORDER = ("mlo_r", "mlo_l", "cc_r", "cc_l")
N_NONIMAGING = 2
FUSION_INPUT_SIZE = 4 * MTO_SIZE + N_NONIMAGING  # 78


@dataclass(frozen=True)
class FusionInput:
    """Named four-view bundle; view order is fixed by construction."""

    mto_mlo_r: Mto
    mto_mlo_l: Mto
    mto_cc_r: Mto
    mto_cc_l: Mto
    nonimaging: np.ndarray  # [normalized age, family history]

    def __post_init__(self) -> None:
        ni = np.asarray(self.nonimaging, dtype=float)
        if ni.shape != (N_NONIMAGING,):
            raise ValueError(f"nonimaging vector must have {N_NONIMAGING} entries")
        if not 0.0 <= ni[0] <= 1.0:
            raise ValueError("normalized age out of [0,1]")
        if ni[1] not in (0.0, 1.0):
            raise ValueError("family history must be 0 or 1")
        object.__setattr__(self, "nonimaging", ni)

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.mto_mlo_r.vector(),
                self.mto_mlo_l.vector(),
                self.mto_cc_r.vector(),
                self.mto_cc_l.vector(),
                self.nonimaging,
            ]
        )

    @property
    def mtos(self) -> tuple[Mto, Mto, Mto, Mto]:
        return (self.mto_mlo_r, self.mto_mlo_l, self.mto_cc_r, self.mto_cc_l)


def assemble(per_view_mtos: Mapping[str, Mto], age_norm: float, family_history: int) -> FusionInput:
    """Bundle the four named per-view outputs with the non-imaging features."""
    missing = [v for v in VIEW_ORDER if v not in per_view_mtos]
    if missing:
        raise ValueError(f"incomplete study: missing view(s) {', '.join(missing)}")
    return FusionInput(
        mto_mlo_r=per_view_mtos["mlo_r"],
        mto_mlo_l=per_view_mtos["mlo_l"],
        mto_cc_r=per_view_mtos["cc_r"],
        mto_cc_l=per_view_mtos["cc_l"],
        nonimaging=np.array([age_norm, float(family_history)]),
    )


@dataclass(frozen=True)
class FusionArch:
    input_size: int = FUSION_INPUT_SIZE
    hidden: tuple[int, ...] = (128, 64, 32, 16)
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.input_size < 1 or len(self.hidden) == 0:
            raise ValueError("invalid fusion architecture")


class FusionNet:
    """Dense stack with a 2-unit softmax head over {benign, malignant}."""

    kind = "fusion_classifier"

    def __init__(self, arch: FusionArch, core: DenseStack, head_w: np.ndarray, head_b: np.ndarray):
        if head_w.shape != (arch.hidden[-1], 2) or head_b.shape != (2,):
            raise ValueError("fusion head shape mismatch")
        self.arch = arch
        self.core = core
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, arch: FusionArch = FusionArch(), seed: int = 0) -> "FusionNet":
        rng = np.random.default_rng(seed)
        core = DenseStack.init(rng, [arch.input_size, *arch.hidden], dropout=arch.dropout)
        return cls(arch, core, glorot_uniform(rng, arch.hidden[-1], 2), np.zeros(2))

    def forward_batch(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """(n, input) -> (n, 2) softmax probabilities."""
        h, _ = self.core.forward(x, train=train, rng=rng)
        return softmax_rows(h @ self.head_w + self.head_b)

    def malignancy(self, vec: np.ndarray) -> float:
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != self.arch.input_size:
            raise ValueError(
                f"dimension mismatch: got {vec.size} features, expected {self.arch.input_size}"
            )
        return float(self.forward_batch(vec[None, :])[0, 1])

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, fp: FocalParams, train=False, rng=None):
        n = x.shape[0]
        h, cache = self.core.forward(x, train=train, rng=rng)
        s = softmax_rows(h @ self.head_w + self.head_b)
        onehot = np.eye(2)[np.asarray(y, dtype=int)]
        loss = float(focal_loss(s, onehot, fp).sum() / (n * 2))
        ds = focal_grad(s, onehot, fp) / (n * 2)
        dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
        gw_head = h.T @ dz
        gb_head = dz.sum(axis=0)
        gw, gb, _ = self.core.backward(cache, dz @ self.head_w.T)
        return loss, gw + gb + [gw_head, gb_head]

    def params(self) -> list[np.ndarray]:
        return self.core.params() + [self.head_w, self.head_b]

    def copy(self) -> "FusionNet":
        return FusionNet(self.arch, self.core.copy(), self.head_w.copy(), self.head_b.copy())

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "arch": {
                "input_size": self.arch.input_size,
                "hidden": list(self.arch.hidden),
                "dropout": self.arch.dropout,
            },
            "core": self.core.to_jsonable(),
            "head": {"w": self.head_w.tolist(), "b": self.head_b.tolist()},
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "FusionNet":
        if d.get("kind") != cls.kind:
            raise ValueError(f"not a {cls.kind} model")
        arch = FusionArch(
            input_size=int(d["arch"]["input_size"]),
            hidden=tuple(int(h) for h in d["arch"]["hidden"]),
            dropout=float(d["arch"]["dropout"]),
        )
        core = DenseStack.from_jsonable(d["core"])
        if core.sizes != [arch.input_size, *arch.hidden]:
            raise ValueError("stored trunk does not match architecture")
        w = np.asarray(d["head"]["w"], dtype=float)
        b = np.asarray(d["head"]["b"], dtype=float)
        return cls(arch, core, w, b)


def classify(net: FusionNet, fi: FusionInput) -> float:
    """Patient-level malignancy probability; pure function of (net, input)."""
    return net.malignancy(fi.vector())


# -- training -------------------------------------------------------------------


@dataclass
class FusionSamples:
    x: np.ndarray  # (n, FUSION_INPUT_SIZE)
    y: np.ndarray  # (n,) outcome 0/1
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("label array length mismatch")

    def __len__(self) -> int:
        return self.x.shape[0]


def balanced_batches(labels: np.ndarray, rng: np.random.Generator, batch_size: int = 4):
    """Index batches with exactly half positives and half negatives.

    Every majority-class sample appears once per epoch; the minority class
    is resampled (reshuffled tiling) to fill its half of each batch.
    """
    if batch_size % 2 != 0:
        raise ValueError("balanced batches need an even batch size")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("class-balanced batches need both classes present")
    half = batch_size // 2
    n_batches = int(np.ceil(max(pos.size, neg.size) / half))

    def cycle(idx: np.ndarray, need: int) -> np.ndarray:
        reps = int(np.ceil(need / idx.size))
        return np.concatenate([rng.permutation(idx) for _ in range(reps)])[:need]

    pos_stream = cycle(pos, n_batches * half)
    neg_stream = cycle(neg, n_batches * half)
    for b in range(n_batches):
        lo, hi = b * half, (b + 1) * half
        yield np.concatenate([pos_stream[lo:hi], neg_stream[lo:hi]])


def train_fusion(
    net: FusionNet,
    train_s: FusionSamples,
    val_s: FusionSamples,
    schedule: TrainSchedule,
    fp: FocalParams = FocalParams(),
) -> tuple[FusionNet, list[dict]]:
    """Balanced-batch SGD with momentum; best validation-AUROC checkpoint."""
    if len(train_s) == 0 or len(val_s) == 0:
        raise ValueError("empty split: train and validation must be non-empty")
    opt = SgdMomentum()
    drop_rng = np.random.default_rng(mix_seed(schedule.seed, 31))
    history: list[dict] = []
    best_auroc = -np.inf
    best_net = net.copy()
    epoch = 0
    for lr, epochs in schedule.stages:
        for _ in range(epochs):
            batch_rng = np.random.default_rng(mix_seed(schedule.seed, 11, epoch))
            epoch_loss, n_batches = 0.0, 0
            for idx in balanced_batches(train_s.y, batch_rng, schedule.batch_size):
                loss, grads = net.loss_and_grads(
                    train_s.x[idx], train_s.y[idx], fp,
                    train=net.arch.dropout > 0, rng=drop_rng,
                )
                if not np.isfinite(loss):
                    raise ValueError("training diverged: non-finite loss")
                opt.step(net.params(), grads, lr)
                epoch_loss += loss
                n_batches += 1
            probs = net.forward_batch(val_s.x)[:, 1]
            try:
                val_auroc = auroc(probs, val_s.y)
            except ValueError:
                val_auroc = 0.5
            history.append(
                {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(n_batches, 1), "val_auroc": val_auroc}
            )
            if val_auroc > best_auroc:
                best_auroc = val_auroc
                best_net = net.copy()
            epoch += 1
    return best_net, history


def build_fusion_samples(
    records: Sequence,
    per_view_net,
    tta_n: int = 1,
    augmenter: AugmentSpec | None = None,
    seed: int = 0,
    threads: int = 1,
) -> FusionSamples:
    """Run the frozen per-view model over each record's four views and
    assemble the 78-vectors. tta_n=1 uses the plain standardized view;
    larger counts average independently augmented copies per view.

    Augmentation streams are keyed on (seed, patient id, view), so the
    result is identical for any threads value."""
    from .mtlnet import normalize_age

    xs = np.empty((len(records), FUSION_INPUT_SIZE))
    ys = np.empty(len(records), dtype=int)
    ids = np.empty(len(records), dtype=int)

    def fill(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            rec = records[i]
            mtos = {}
            for v, view in enumerate(VIEW_ORDER):
                img = rec.images[v]  # records keep views in canonical order
                if tta_n == 1 and augmenter is None:
                    mtos[view] = per_view_net.forward(standardize(img).ravel())
                else:
                    mtos[view] = predict_tta(
                        per_view_net, img, n=tta_n, augmenter=augmenter,
                        seed=mix_seed(seed, rec.id, v),
                    )
            fi = assemble(mtos, normalize_age(rec.age), rec.family_history)
            xs[i] = fi.vector()
            ys[i] = rec.outcome
            ids[i] = rec.id

    if threads > 1 and len(records) > 1:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, len(records), threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda k: fill(bounds[k], bounds[k + 1]), range(threads)))
    else:
        fill(0, len(records))
    return FusionSamples(x=xs, y=ys, ids=ids)


def train_classifier(
    net: FusionNet,
    per_view_net,
    train_records: Sequence,
    val_records: Sequence,
    schedule: TrainSchedule,
    fp: FocalParams = FocalParams(),
    stage1_ids: set[int] | None = None,
) -> tuple[FusionNet, list[dict], FusionSamples, FusionSamples]:
    """Stage-2 training against a frozen per-view model.

    Refuses to proceed if any stage-2 training patient also appears in the
    stage-1 id set: the per-view model has already seen those images.
    """
    if stage1_ids is not None:
        overlap = sorted({r.id for r in train_records} & set(stage1_ids))
        if overlap:
            raise ValueError(f"data leakage: {len(overlap)} stage-2 patients overlap stage-1")
    train_s = build_fusion_samples(train_records, per_view_net)
    val_s = build_fusion_samples(val_records, per_view_net)
    best, history = train_fusion(net, train_s, val_s, schedule, fp)
    return best, history, train_s, val_s


def classify_tta(
    fusion_net: FusionNet,
    per_view_net,
    images: Sequence[np.ndarray],
    age_norm: float,
    family_history: int,
    n: int = 100,
    augmenter: AugmentSpec | None = None,
    seed: int = 0,
) -> float:
    """Classify with per-view test-time augmentation; images come in
    canonical view order and each view gets an independent augmentation
    stream."""
    mtos = {
        view: predict_tta(per_view_net, images[v], n=n, augmenter=augmenter, seed=mix_seed(seed, v))
        for v, view in enumerate(VIEW_ORDER)
    }
    return classify(fusion_net, assemble(mtos, age_norm, family_history))


# -- analyses -------------------------------------------------------------------


def saliency(
    per_view_net,
    view_image: np.ndarray,
    patch_size: int = 3,
    stride: int = 1,
    perturb: str = "mean",
    delta: float = 0.0,
) -> np.ndarray:
    """Occlusion-sensitivity map of the per-view malignancy output.

    The view is standardized once; each patch position is then perturbed
    (perturb="mean": set the patch to the standardized mean, 0, plus delta;
    perturb="add": add delta to the patch) and the squared change of the
    malignancy output is accumulated onto the covered pixels. Each pixel
    reports the mean squared deviation over the patches that covered it.
    """
    if perturb not in ("mean", "add"):
        raise ValueError("perturb must be 'mean' or 'add'")
    img = standardize(np.asarray(view_image, dtype=float))
    rows, cols = img.shape
    if patch_size < 1 or patch_size > min(rows, cols):
        raise ValueError("patch_size out of range")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    base = per_view_net.forward(img.ravel()).malignancy
    acc = np.zeros_like(img)
    hits = np.zeros_like(img)
    for r in range(0, rows - patch_size + 1, stride):
        for c in range(0, cols - patch_size + 1, stride):
            perturbed = img.copy()
            if perturb == "mean":
                perturbed[r : r + patch_size, c : c + patch_size] = delta
            else:
                perturbed[r : r + patch_size, c : c + patch_size] += delta
            p = per_view_net.forward(perturbed.ravel()).malignancy
            d2 = (p - base) ** 2
            acc[r : r + patch_size, c : c + patch_size] += d2
            hits[r : r + patch_size, c : c + patch_size] += 1.0
    np.maximum(hits, 1.0, out=hits)
    return acc / hits


def density_variance(mtos: Sequence[Mto]) -> float:
    """Population variance of the four per-view density predictions on the
    0-100 visual-analogue scale."""
    if len(mtos) != 4:
        raise ValueError("density variance needs exactly four per-view outputs")
    d = np.array([m.density for m in mtos]) * 100.0
    return float(np.var(d))
