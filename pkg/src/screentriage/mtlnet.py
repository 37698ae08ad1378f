"""Per-view multi-task model: one flattened view image in, 19 outputs out.

Output layout (the per-view prediction vector):

    diagnosis    2-softmax  {benign, malignant}
    sign         6-softmax  {none, circumscribed, spiculated,
                             micro-calcification, distortion,
                             asymmetrical density}
    suspicion    5-softmax  {normal .. malignant}
    conspicuity  4-softmax  {not visible .. clearly visible}
    density      sigmoid    fraction of the 0-100 VAS scale
    age          sigmoid    (age - 40) / 33

Architecture: plain MLP (default 2080 -> 128 -> 64 -> heads), ReLU, dropout
0.2 during training only. Forward and backward passes are hand-written;
the backward pass is validated against central finite differences in the
test suite. Categorical heads train with one-vs-rest focal loss averaged
over classes; regression heads with MSE on the sigmoid output; the
diagnosis task additionally carries inverse-frequency class weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .imaging import AugmentSpec, clahe, full_pipeline, standardize
from .losses import FocalParams, TaskWeights, focal_grad, focal_loss
from .metrics import auroc
from .netcore import DenseStack, SgdMomentum, glorot_uniform, mix_seed, sigmoid, softmax_rows

__all__ = [
    "HEAD_LAYOUT",
    "MTO_SIZE",
    "Mto",
    "MtlArch",
    "TrainSchedule",
    "ViewSamples",
    "MultiTaskNet",
    "normalize_age",
    "denormalize_age",
    "train_step",
    "train",
    "predict_tta",
    "save_model",
    "load_model",
]

HEAD_LAYOUT = (
    ("diagnosis", 2),
    ("sign", 6),
    ("suspicion", 5),
    ("conspicuity", 4),
    ("density", 1),
    ("age", 1),
)
MTO_SIZE = sum(dim for _, dim in HEAD_LAYOUT)  # 19
_CATEGORICAL = ("diagnosis", "sign", "suspicion", "conspicuity")
_REGRESSION = ("density", "age")

AGE_LO, AGE_SPAN = 40.0, 33.0


def normalize_age(age_years: float) -> float:
    return (age_years - AGE_LO) / AGE_SPAN


def denormalize_age(age_unit: float) -> float:
    return AGE_LO + AGE_SPAN * age_unit


@dataclass(frozen=True)
class Mto:
    """One per-view prediction; simplex heads each sum to 1."""

    diagnosis: np.ndarray
    sign: np.ndarray
    suspicion: np.ndarray
    conspicuity: np.ndarray
    density: float
    age: float

    def __post_init__(self) -> None:
        for name, dim in HEAD_LAYOUT:
            if name in _REGRESSION:
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} out of [0,1]")
                continue
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (dim,):
                raise ValueError(f"{name} must have {dim} entries")
            if abs(float(v.sum()) - 1.0) > 1e-6 or v.min() < 0:
                raise ValueError(f"{name} is not a probability simplex")

    @property
    def malignancy(self) -> float:
        return float(self.diagnosis[1])

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.diagnosis, self.sign, self.suspicion, self.conspicuity, [self.density], [self.age]]
        )

    @classmethod
    def from_vector(cls, v) -> "Mto":
        v = np.asarray(v, dtype=float)
        if v.shape != (MTO_SIZE,):
            raise ValueError(f"per-view output vector must have {MTO_SIZE} entries")
        return cls(
            diagnosis=v[0:2],
            sign=v[2:8],
            suspicion=v[8:13],
            conspicuity=v[13:17],
            density=float(v[17]),
            age=float(v[18]),
        )


@dataclass(frozen=True)
class MtlArch:
    input_size: int = 2080  # 40 x 52
    hidden: tuple[int, ...] = (128, 64)
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.input_size < 1:
            raise ValueError("input_size must be >= 1")
        if len(self.hidden) == 0:
            raise ValueError("at least one hidden layer required")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be >= 1")


@dataclass(frozen=True)
class TrainSchedule:
    """Staged (learning rate, epochs); rates must not increase across stages."""

    stages: tuple[tuple[float, int], ...] = ((1e-2, 5), (1e-3, 20))
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        rates = [lr for lr, _ in self.stages]
        if any(lr <= 0 for lr in rates):
            raise ValueError("learning rates must be positive")
        if any(a < b for a, b in zip(rates, rates[1:])):
            raise ValueError("learning rates must be non-increasing across stages")
        if any(ep < 0 for _, ep in self.stages):
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_epochs(self) -> int:
        return sum(ep for _, ep in self.stages)


@dataclass
class ViewSamples:
    """Flattened per-view training samples with the full 6-task label set."""

    x: np.ndarray  # (n, input_size), already preprocessed
    diagnosis: np.ndarray  # (n,) 0/1
    sign: np.ndarray  # (n,) 0..5
    suspicion: np.ndarray  # (n,) 0..4
    conspicuity: np.ndarray  # (n,) 0..3
    density: np.ndarray  # (n,) in [0,1]
    age: np.ndarray  # (n,) in [0,1]

    def __post_init__(self) -> None:
        n = self.x.shape[0]
        for name in ("diagnosis", "sign", "suspicion", "conspicuity", "density", "age"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"label array {name} must have length {n}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def labels(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def take(self, idx) -> "ViewSamples":
        return ViewSamples(
            x=self.x[idx],
            diagnosis=self.diagnosis[idx],
            sign=self.sign[idx],
            suspicion=self.suspicion[idx],
            conspicuity=self.conspicuity[idx],
            density=self.density[idx],
            age=self.age[idx],
        )


class MultiTaskNet:
    """Shared ReLU trunk with six linear heads."""

    kind = "per_view_mtl"

    def __init__(self, arch: MtlArch, core: DenseStack, heads: dict[str, tuple[np.ndarray, np.ndarray]]):
        for name, dim in HEAD_LAYOUT:
            w, b = heads[name]
            if w.shape != (arch.hidden[-1], dim) or b.shape != (dim,):
                raise ValueError(f"head {name} shape mismatch")
        self.arch = arch
        self.core = core
        self.heads = heads

    @classmethod
    def init(cls, arch: MtlArch, seed: int) -> "MultiTaskNet":
        rng = np.random.default_rng(seed)
        core = DenseStack.init(rng, [arch.input_size, *arch.hidden], dropout=arch.dropout)
        heads = {}
        for name, dim in HEAD_LAYOUT:
            heads[name] = (glorot_uniform(rng, arch.hidden[-1], dim), np.zeros(dim))
        return cls(arch, core, heads)

    # -- inference ---------------------------------------------------------

    def forward_batch(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        h, cache = self.core.forward(x, train=train, rng=rng)
        out: dict[str, np.ndarray] = {}
        for name, _dim in HEAD_LAYOUT:
            w, b = self.heads[name]
            z = h @ w + b
            out[name] = softmax_rows(z) if name in _CATEGORICAL else sigmoid(z)[:, 0]
        return out, (h, cache)

    def forward(self, view_vector) -> Mto:
        x = np.asarray(view_vector, dtype=float).ravel()[None, :]
        if x.shape[1] != self.arch.input_size:
            raise ValueError(f"input dimension mismatch: got {x.shape[1]}, expected {self.arch.input_size}")
        out, _ = self.forward_batch(x)
        return Mto(
            diagnosis=out["diagnosis"][0],
            sign=out["sign"][0],
            suspicion=out["suspicion"][0],
            conspicuity=out["conspicuity"][0],
            density=float(out["density"][0]),
            age=float(out["age"][0]),
        )

    # -- training ----------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        ps = self.core.params()
        for name, _ in HEAD_LAYOUT:
            ps.extend(self.heads[name])
        return ps

    def copy(self) -> "MultiTaskNet":
        return MultiTaskNet(
            self.arch,
            self.core.copy(),
            {k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
        )

    def loss_and_grads(
        self,
        batch: ViewSamples,
        weights: TaskWeights,
        fp: FocalParams,
        class_weights: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ):
        """Total weighted loss, per-task losses, and gradients for every parameter."""
        n = len(batch)
        cw = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=float)
        h, cache = self.core.forward(batch.x, train=train, rng=rng)

        per_task: dict[str, float] = {}
        grad_h = np.zeros_like(h)
        head_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for name, dim in HEAD_LAYOUT:
            w_head, b_head = self.heads[name]
            z = h @ w_head + b_head
            task_w = getattr(weights, name)
            if name in _CATEGORICAL:
                s = softmax_rows(z)
                onehot = np.eye(dim)[batch.labels(name)]
                sample_w = cw if name == "diagnosis" else np.ones(n)
                fl = focal_loss(s, onehot, fp)
                per_task[name] = float((sample_w[:, None] * fl).sum() / (n * dim))
                ds = sample_w[:, None] * focal_grad(s, onehot, fp) / (n * dim)
                dz = s * (ds - (ds * s).sum(axis=1, keepdims=True))
            else:
                r = sigmoid(z)[:, 0]
                t = batch.labels(name)
                per_task[name] = float(np.mean((r - t) ** 2))
                dz = (2.0 * (r - t) * r * (1.0 - r) / n)[:, None]
            dz = task_w * dz
            head_grads[name] = (h.T @ dz, dz.sum(axis=0))
            grad_h += dz @ w_head.T

        total = losses.mtl_loss(per_task, weights)
        gw, gb, _ = self.core.backward(cache, grad_h)
        grads = gw + gb
        for name, _ in HEAD_LAYOUT:
            grads.extend(head_grads[name])
        return total, per_task, grads

    # -- persistence ---------------------------------------------------------

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "arch": {
                "input_size": self.arch.input_size,
                "hidden": list(self.arch.hidden),
                "dropout": self.arch.dropout,
            },
            "core": self.core.to_jsonable(),
            "heads": {k: {"w": w.tolist(), "b": b.tolist()} for k, (w, b) in self.heads.items()},
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "MultiTaskNet":
        if d.get("kind") != cls.kind:
            raise ValueError(f"not a {cls.kind} model")
        arch = MtlArch(
            input_size=int(d["arch"]["input_size"]),
            hidden=tuple(int(h) for h in d["arch"]["hidden"]),
            dropout=float(d["arch"]["dropout"]),
        )
        core = DenseStack.from_jsonable(d["core"])
        if core.sizes != [arch.input_size, *arch.hidden]:
            raise ValueError("stored trunk does not match architecture")
        heads = {}
        for name, dim in HEAD_LAYOUT:
            if name not in d["heads"]:
                raise ValueError(f"missing head {name}")
            w = np.asarray(d["heads"][name]["w"], dtype=float)
            b = np.asarray(d["heads"][name]["b"], dtype=float)
            if w.shape != (arch.hidden[-1], dim):
                raise ValueError(f"head {name} shape mismatch")
            heads[name] = (w, b)
        return cls(arch, core, heads)


def train_step(
    net: MultiTaskNet,
    batch: ViewSamples,
    weights: TaskWeights,
    fp: FocalParams,
    lr: float,
    class_weights: np.ndarray | None = None,
    opt: SgdMomentum | None = None,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> float:
    """One gradient step in place; returns the batch loss."""
    loss, _, grads = net.loss_and_grads(batch, weights, fp, class_weights, train=train, rng=rng)
    if not np.isfinite(loss):
        raise ValueError("training diverged: non-finite loss")
    params = net.params()
    if opt is None:
        for p, g in zip(params, grads):
            p -= lr * g
    else:
        opt.step(params, grads, lr)
    return float(loss)


def diagnosis_class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights per class, normalized to mean 1 over classes."""
    labels = np.asarray(labels)
    n = labels.size
    counts = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=float)
    if counts.min() == 0:
        return np.ones(2)
    return n / (2.0 * counts)


def augment_all(
    images: np.ndarray,
    spec: AugmentSpec,
    seed: int,
    epoch: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Augment every image with its own derived stream, flattened.

    The stream is keyed on (seed, epoch, sample index), never on thread
    identity, so any threads value gives identical bytes.
    """
    n = images.shape[0]
    out = np.empty((n, images.shape[1] * images.shape[2]))

    def fill(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            out[i] = full_pipeline(images[i], spec, seed=mix_seed(seed, 20, epoch, i)).ravel()

    if threads > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(lambda k: fill(bounds[k], bounds[k + 1]), range(threads)))
    else:
        fill(0, n)
    return out


def train(
    net: MultiTaskNet,
    train_data: ViewSamples,
    val_data: ViewSamples,
    schedule: TrainSchedule,
    weights: TaskWeights = TaskWeights(),
    fp: FocalParams = FocalParams(),
    train_images: np.ndarray | None = None,
    augmenter: AugmentSpec | None = None,
    threads: int = 1,
) -> tuple[MultiTaskNet, list[dict]]:
    """SGD-with-momentum over the schedule; keeps the checkpoint with the
    best validation diagnosis AUROC seen at any epoch end.

    When train_images is given (one raw view per sample, aligned with
    train_data rows), every epoch retrains on freshly augmented copies;
    train_data.x then only fixes shapes for the first epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("empty split: train and validation must be non-empty")
    if train_images is not None and train_images.shape[0] != len(train_data):
        raise ValueError("one raw image per training sample required")
    cw_by_class = diagnosis_class_weights(train_data.diagnosis)
    opt = SgdMomentum()
    drop_rng = np.random.default_rng(mix_seed(schedule.seed, 30))
    history: list[dict] = []
    best_auroc = -np.inf
    best_net = net.copy()
    epoch = 0
    for lr, epochs in schedule.stages:
        for _ in range(epochs):
            order = np.random.default_rng(mix_seed(schedule.seed, 10, epoch)).permutation(len(train_data))
            epoch_data = train_data
            if train_images is not None:
                aug = augmenter if augmenter is not None else AugmentSpec()
                epoch_data = ViewSamples(
                    x=augment_all(train_images, aug, schedule.seed, epoch=epoch, threads=threads),
                    diagnosis=train_data.diagnosis,
                    sign=train_data.sign,
                    suspicion=train_data.suspicion,
                    conspicuity=train_data.conspicuity,
                    density=train_data.density,
                    age=train_data.age,
                )
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), schedule.batch_size):
                idx = order[start : start + schedule.batch_size]
                batch = epoch_data.take(idx)
                cw = cw_by_class[batch.diagnosis]
                epoch_loss += train_step(
                    net, batch, weights, fp, lr, class_weights=cw, opt=opt,
                    rng=drop_rng, train=net.arch.dropout > 0,
                )
                n_batches += 1
            val_out, _ = net.forward_batch(val_data.x)
            val_auroc = _safe_auroc(val_out["diagnosis"][:, 1], val_data.diagnosis)
            history.append(
                {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(n_batches, 1), "val_auroc": val_auroc}
            )
            if val_auroc > best_auroc:
                best_auroc = val_auroc
                best_net = net.copy()
            epoch += 1
    return best_net, history


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except ValueError:
        return 0.5


def predict_tta(
    net: MultiTaskNet,
    view_image: np.ndarray,
    n: int = 100,
    augmenter: AugmentSpec | None = None,
    seed: int = 0,
) -> Mto:
    """Mean prediction over n independently augmented copies of the view.

    With n=1 and a fully disabled augmenter this equals
    forward(standardize(view)) exactly. The mean of simplex vectors is a
    simplex, so the output is a valid prediction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    augmenter = augmenter or AugmentSpec()
    img = np.asarray(view_image, dtype=float)
    acc = np.zeros(MTO_SIZE)
    for k in range(n):
        aug = full_pipeline(img, augmenter, seed=mix_seed(seed, k))
        acc += net.forward(aug.ravel()).vector()
    return Mto.from_vector(acc / n)


def prepare_view_vector(view_image: np.ndarray) -> np.ndarray:
    """Deterministic preprocessing: nominal-parameter CLAHE, then
    standardization. Keeps plain forward passes on the same intensity
    footing as the augmented training copies, which always see CLAHE."""
    spec = AugmentSpec()
    a = clahe(np.asarray(view_image, dtype=float), spec.clahe_grid, spec.clahe_clip)
    return standardize(a).ravel()


# ---------------------------------------------------------------------------
# Versioned JSON persistence shared by all three networks.

FORMAT_VERSION = 1


def save_model(path, net, seed: int | None = None, schedule=None, metrics: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "model": net.to_jsonable(),
        "seed": seed,
        "schedule": schedule,
        "metrics": metrics or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_model(path) -> tuple[object, dict]:
    """Returns (net, document). Dispatches on the stored kind."""
    from . import fusion as fusion_mod
    from . import triage as triage_mod

    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format version {doc.get('format_version')}")
    kind = doc["model"].get("kind")
    if kind == MultiTaskNet.kind:
        net = MultiTaskNet.from_jsonable(doc["model"])
    elif kind == fusion_mod.FusionNet.kind:
        net = fusion_mod.FusionNet.from_jsonable(doc["model"])
    elif kind == triage_mod.TriageNet.kind:
        net = triage_mod.TriageNet.from_jsonable(doc["model"])
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return net, doc
