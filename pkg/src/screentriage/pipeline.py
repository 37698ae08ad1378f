"""End-to-end run orchestration.

Seven stages, each reading its predecessors' files from the output directory
and writing its own: generate -> train-mtl -> train-classifier ->
train-triage -> evaluate -> sweep -> report. Every stage is a pure function
of (resolved config, artifacts on disk), so re-running any stage reproduces
its outputs byte for byte. The held-out split is only ever touched by
evaluate and the two stages that consume evaluate's cached features.
"""

import dataclasses
import json
import os
from contextlib import contextmanager

import numpy as np

from .cohort import (
    SIGNS,
    VIEW_NAMES,
    Partition,
    PatientRecord,
    SplitSpec,
    fmt6,
    generate_cohort,
    load_cohort,
    partition,
    save_cohort,
)
from .config import ExperimentConfig
from .fusion import FusionArch, FusionNet, build_fusion_samples, saliency, train_classifier
from .imaging import read_pgm
from .metrics import confusion
from .mtlnet import (
    MtlArch,
    MultiTaskNet,
    Mto,
    ViewSamples,
    load_model,
    normalize_age,
    prepare_view_vector,
    save_model,
    train,
)
from .reports import (
    COMPARISON_COLUMNS,
    DENSITY_VARIANCE_COLUMNS,
    agreement_table,
    comparison_table,
    density_variance_table,
    plot_operating_curve,
    plot_saliency,
    table_to_csv,
    workload_table,
)
from .triage import (
    TriageData,
    TriagePolicy,
    curve_to_csv,
    load_policy,
    operating_curve,
    save_policy,
    system_confusion,
    train_triage,
)

__all__ = [
    "MissingArtifact",
    "RunPaths",
    "output_lock",
    "stage_generate",
    "stage_train_mtl",
    "stage_train_classifier",
    "stage_train_triage",
    "stage_evaluate",
    "stage_sweep",
    "stage_report",
    "run_all",
]

PARTITION_VERSION = 1
FEATURES_VERSION = 1


class MissingArtifact(FileNotFoundError):
    """A stage was asked to run before its inputs exist."""


@dataclasses.dataclass(frozen=True)
class RunPaths:
    """Canonical artifact layout under one output directory."""

    root: str

    def _p(self, name: str) -> str:
        return os.path.join(self.root, name)

    @property
    def resolved_config(self) -> str:
        return self._p("resolved_config.cfg")

    @property
    def cohort_csv(self) -> str:
        return self._p("cohort.csv")

    @property
    def partition_json(self) -> str:
        return self._p("partition.json")

    @property
    def mtl_model(self) -> str:
        return self._p("mtl_model.json")

    @property
    def fusion_model(self) -> str:
        return self._p("fusion_model.json")

    @property
    def triage_model(self) -> str:
        return self._p("triage_model.json")

    @property
    def triage_policy(self) -> str:
        return self._p("triage_policy.json")

    @property
    def holdout_features(self) -> str:
        return self._p("holdout_features.json")

    @property
    def predictions(self) -> str:
        return self._p("predictions.csv")

    @property
    def comparison(self) -> str:
        return self._p("comparison.csv")

    @property
    def summary(self) -> str:
        return self._p("summary.json")

    @property
    def curve_csv(self) -> str:
        return self._p("operating_curve.csv")

    @property
    def curve_svg(self) -> str:
        return self._p("operating_curve.svg")

    @property
    def agreement(self) -> str:
        return self._p("agreement_by_strata.csv")

    @property
    def workload(self) -> str:
        return self._p("workload_by_strata.csv")

    @property
    def density_variance(self) -> str:
        return self._p("density_variance.csv")

    @property
    def saliency_svg(self) -> str:
        return self._p("saliency.svg")

    @property
    def lock(self) -> str:
        return self._p(".lock")


@contextmanager
def output_lock(paths: RunPaths):
    """Exclusive hold on the output directory for the duration of a stage."""
    os.makedirs(paths.root, exist_ok=True)
    try:
        fd = os.open(paths.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {paths.root} is locked by another run "
            f"(remove {paths.lock} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield paths
    finally:
        os.unlink(paths.lock)


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing artifact {path}; run the {producer} stage first")
    return path


def _echo_config(cfg: ExperimentConfig, paths: RunPaths) -> None:
    with open(paths.resolved_config, "w") as f:
        f.write(cfg.to_text())


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


# -- cohort access -------------------------------------------------------------------


def _load_partition(paths: RunPaths) -> Partition:
    with open(_require(paths.partition_json, "generate")) as f:
        doc = json.load(f)
    if doc.get("format_version") != PARTITION_VERSION:
        raise ValueError(f"{paths.partition_json}: unsupported partition format")
    return Partition(**{k: np.asarray(v, dtype=int) for k, v in doc["splits"].items()})


def _load_records(paths: RunPaths) -> list[PatientRecord]:
    return load_cohort(_require(paths.cohort_csv, "generate"), load_images=False)


def _attach_images(records: list[PatientRecord], base_dir: str) -> list[PatientRecord]:
    """Read views for just these records; keeps the rest of the cohort lean."""
    out = []
    for rec in records:
        imgs = tuple(read_pgm(os.path.join(base_dir, p)) for p in rec.image_paths)
        out.append(dataclasses.replace(rec, images=imgs))
    return out


def _subset(records: list[PatientRecord], idx: np.ndarray, paths: RunPaths) -> list[PatientRecord]:
    return _attach_images([records[i] for i in idx], os.path.dirname(paths.cohort_csv))


# -- stage: generate -------------------------------------------------------------------


def stage_generate(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    records = generate_cohort(cfg.cohort_n, seed=cfg.cohort_seed)
    save_cohort(records, cfg.out)
    part = partition(
        len(records),
        SplitSpec(fractions=cfg.split_fractions, holdout=cfg.holdout, seed=cfg.split_seed),
    )
    _write_json(
        paths.partition_json,
        {
            "format_version": PARTITION_VERSION,
            "cohort_n": len(records),
            "splits": {k: v.tolist() for k, v in part.parts().items()},
        },
    )
    _echo_config(cfg, paths)
    return {"cohort_n": len(records), "splits": {k: int(v.size) for k, v in part.parts().items()}}


# -- stage: per-view model --------------------------------------------------------------


def _view_samples(records: list[PatientRecord], with_images: bool = False):
    """Four rows per patient: the flattened standardized view plus all six
    label columns. Optionally returns the raw views for per-epoch
    re-augmentation."""
    sign_idx = {s: i for i, s in enumerate(SIGNS)}
    n = 4 * len(records)
    first = np.asarray(records[0].images[0])
    x = np.empty((n, first.size))
    raw = np.empty((n,) + first.shape) if with_images else None
    diagnosis = np.empty(n, dtype=int)
    sign = np.empty(n, dtype=int)
    suspicion = np.empty(n, dtype=int)
    conspicuity = np.empty(n, dtype=int)
    density = np.empty(n)
    age = np.empty(n)
    for i, rec in enumerate(records):
        for v in range(4):
            row = 4 * i + v
            x[row] = prepare_view_vector(rec.images[v])
            if raw is not None:
                raw[row] = rec.images[v]
            diagnosis[row] = rec.outcome
            sign[row] = sign_idx[rec.sign]
            suspicion[row] = rec.suspicion
            conspicuity[row] = rec.conspicuity
            density[row] = rec.densities[v] / 100.0
            age[row] = normalize_age(rec.age)
    samples = ViewSamples(
        x=x,
        diagnosis=diagnosis,
        sign=sign,
        suspicion=suspicion,
        conspicuity=conspicuity,
        density=density,
        age=age,
    )
    return (samples, raw) if with_images else samples


def stage_train_mtl(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    records = _load_records(paths)
    part = _load_partition(paths)
    train_recs = _subset(records, part.stage1, paths)
    val_recs = _subset(records, part.validation, paths)

    train_s, train_images = _view_samples(train_recs, with_images=True)
    val_s = _view_samples(val_recs)
    arch = MtlArch(
        input_size=train_s.x.shape[1], hidden=tuple(cfg.mtl_hidden), dropout=cfg.mtl_dropout
    )
    net = MultiTaskNet.init(arch, seed=cfg.seed)
    best, history = train(
        net,
        train_s,
        val_s,
        cfg.mtl_schedule(),
        fp=cfg.focal(),
        train_images=train_images if cfg.train_augment else None,
        augmenter=cfg.augmenter() if cfg.train_augment else None,
        threads=cfg.threads,
    )
    val_auroc = max(h["val_auroc"] for h in history)
    save_model(
        paths.mtl_model,
        best,
        seed=cfg.seed,
        schedule={"stages": [list(s) for s in cfg.mtl_stages], "batch_size": cfg.mtl_batch},
        metrics={"val_diagnosis_auroc": val_auroc, "epochs": len(history)},
    )
    _echo_config(cfg, paths)
    return {"val_diagnosis_auroc": val_auroc, "train_views": len(train_s)}


# -- stage: fusion classifier --------------------------------------------------------------


def stage_train_classifier(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    per_view_net, _ = load_model(_require(paths.mtl_model, "train-mtl"))
    records = _load_records(paths)
    part = _load_partition(paths)
    train_recs = _subset(records, part.stage2, paths)
    val_recs = _subset(records, part.validation, paths)
    stage1_ids = {records[i].id for i in part.stage1}

    arch = FusionArch(hidden=tuple(cfg.fusion_hidden), dropout=cfg.fusion_dropout)
    net = FusionNet.init(arch, seed=cfg.seed)
    best, history, _, _ = train_classifier(
        net,
        per_view_net,
        train_recs,
        val_recs,
        cfg.fusion_schedule(),
        fp=cfg.focal(),
        stage1_ids=stage1_ids,
    )
    val_auroc = max(h["val_auroc"] for h in history)
    save_model(
        paths.fusion_model,
        best,
        seed=cfg.seed,
        schedule={"stages": [list(s) for s in cfg.fusion_stages], "batch_size": cfg.fusion_batch},
        metrics={"val_auroc": val_auroc, "train_patients": len(train_recs)},
    )
    _echo_config(cfg, paths)
    return {"val_auroc": val_auroc, "train_patients": len(train_recs)}


# -- stage: triage -------------------------------------------------------------------


def _triage_features(
    records: list[PatientRecord], per_view_net, fusion_net, cfg: ExperimentConfig
) -> tuple[TriageData, np.ndarray]:
    """Averaged per-view outputs -> fusion probability -> 79-column triage
    features. Returns the data plus the raw 78-column fusion block so report
    stages can recover per-view outputs without another pass."""
    fs = build_fusion_samples(
        records,
        per_view_net,
        tta_n=cfg.tta_n,
        augmenter=cfg.augmenter(),
        seed=cfg.seed,
        threads=cfg.threads,
    )
    clf_prob = fusion_net.forward_batch(fs.x)[:, 1]
    x = np.column_stack([fs.x[:, -2:], fs.x[:, :-2], clf_prob])
    data = TriageData(
        x=x,
        rad_pred=np.array([r.rad_diagnosis for r in records]),
        clf_prob=clf_prob,
        outcome=np.array([r.outcome for r in records]),
    )
    return data, fs.x


def stage_train_triage(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    per_view_net, _ = load_model(_require(paths.mtl_model, "train-mtl"))
    fusion_net, _ = load_model(_require(paths.fusion_model, "train-classifier"))
    records = _load_records(paths)
    part = _load_partition(paths)
    train_data, _ = _triage_features(_subset(records, part.stage3, paths), per_view_net, fusion_net, cfg)
    val_data, _ = _triage_features(
        _subset(records, part.validation, paths), per_view_net, fusion_net, cfg
    )

    policy, report = train_triage(
        train_data,
        val_data,
        delta=cfg.triage_delta,
        b_max=cfg.triage_b_max,
        seed=cfg.seed,
        lr=cfg.triage_lr,
        epochs=cfg.triage_epochs,
        hidden=tuple(cfg.triage_hidden),
        threads=cfg.threads,
        fnr_limit=cfg.fnr_limit,
        fpr_limit=cfg.fpr_limit,
    )
    selection = report["selection"]
    save_model(
        paths.triage_model,
        policy.net,
        seed=cfg.seed,
        metrics=selection if isinstance(selection, dict) else {"selection": selection},
    )
    save_policy(paths.triage_policy, policy, val_metrics=report)
    _echo_config(cfg, paths)
    return {"feasible": policy.feasible, "alpha": policy.alpha, "beta": policy.beta, **report}


# -- stage: evaluate -------------------------------------------------------------------


def _counts_doc(c) -> dict:
    from .metrics import cohen_kappa, f1_score

    def safe(fn):
        try:
            return fn(c)
        except ValueError:
            return float("nan")

    return {
        "tp": c.tp,
        "tn": c.tn,
        "fp": c.fp,
        "fn": c.fn,
        "kappa": safe(cohen_kappa),
        "f1": safe(f1_score),
    }


def stage_evaluate(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    per_view_net, _ = load_model(_require(paths.mtl_model, "train-mtl"))
    fusion_net, _ = load_model(_require(paths.fusion_model, "train-classifier"))
    policy, policy_doc = load_policy(_require(paths.triage_policy, "train-triage"))
    records = _load_records(paths)
    part = _load_partition(paths)
    holdout = _subset(records, part.holdout, paths)

    data, fusion_x = _triage_features(holdout, per_view_net, fusion_net, cfg)
    ids = np.array([r.id for r in holdout])
    with open(paths.holdout_features, "w") as f:
        json.dump(
            {
                "format_version": FEATURES_VERSION,
                "ids": ids.tolist(),
                "fusion_x": fusion_x.tolist(),
                "clf_prob": data.clf_prob.tolist(),
                "rad_pred": data.rad_pred.astype(int).tolist(),
                "outcome": data.outcome.astype(int).tolist(),
            },
            f,
            sort_keys=True,
            separators=(",", ":"),
        )
        f.write("\n")

    w = policy.net.forward_batch(data.x)
    to_rad = w >= policy.alpha
    decision = np.where(to_rad, data.rad_pred.astype(int), (data.clf_prob >= policy.beta).astype(int))

    header = ["id", "outcome", "rad_pred", "clf_prob", "w", "to_radiologist", "decision"]
    header += [f"density_pred_{v}" for v in VIEW_NAMES] + [f"age_pred_{v}" for v in VIEW_NAMES]
    lines = [",".join(header)]
    for i in range(len(holdout)):
        row = [
            str(int(ids[i])),
            str(int(data.outcome[i])),
            str(int(data.rad_pred[i])),
            fmt6(data.clf_prob[i]),
            fmt6(w[i]),
            str(int(to_rad[i])),
            str(int(decision[i])),
        ]
        row += [fmt6(fusion_x[i, 19 * v + 17] * 100.0) for v in range(4)]
        row += [fmt6(40.0 + 33.0 * fusion_x[i, 19 * v + 18]) for v in range(4)]
        lines.append(",".join(row))
    with open(paths.predictions, "w") as f:
        f.write("\n".join(lines) + "\n")

    rows = comparison_table(policy, data, seed=cfg.seed)
    with open(paths.comparison, "w") as f:
        f.write(table_to_csv(COMPARISON_COLUMNS, rows))

    rad_counts = confusion(data.rad_pred.astype(float), data.outcome, 0.5)
    clf_counts = confusion(data.clf_prob, data.outcome, policy.beta)
    sys_counts = system_confusion(policy, data)
    summary = {
        "n_holdout": len(holdout),
        "policy": {
            "alpha": policy.alpha,
            "beta": policy.beta,
            "b_R": policy.b_r,
            "b_C": policy.b_c,
            "feasible": policy.feasible,
            "validation": policy_doc.get("val_metrics", {}),
        },
        "frac_to_radiologist": float(np.mean(to_rad)),
        "radiologist": _counts_doc(rad_counts),
        "classifier": _counts_doc(clf_counts),
        "system": _counts_doc(sys_counts),
    }
    _write_json(paths.summary, summary)
    _echo_config(cfg, paths)
    return summary


def _load_features(paths: RunPaths) -> tuple[np.ndarray, np.ndarray, TriageData]:
    with open(_require(paths.holdout_features, "evaluate")) as f:
        doc = json.load(f)
    if doc.get("format_version") != FEATURES_VERSION:
        raise ValueError(f"{paths.holdout_features}: unsupported features format")
    fusion_x = np.asarray(doc["fusion_x"], dtype=float)
    clf_prob = np.asarray(doc["clf_prob"], dtype=float)
    x = np.column_stack([fusion_x[:, -2:], fusion_x[:, :-2], clf_prob])
    data = TriageData(
        x=x,
        rad_pred=np.asarray(doc["rad_pred"], dtype=int),
        clf_prob=clf_prob,
        outcome=np.asarray(doc["outcome"], dtype=int),
    )
    return np.asarray(doc["ids"], dtype=int), fusion_x, data


# -- stage: sweep -------------------------------------------------------------------


def stage_sweep(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    policy, _ = load_policy(_require(paths.triage_policy, "train-triage"))
    _, _, data = _load_features(paths)
    points = operating_curve(policy, data)
    with open(paths.curve_csv, "w") as f:
        f.write(curve_to_csv(points))
    with open(paths.curve_svg, "w") as f:
        f.write(plot_operating_curve(points))
    _echo_config(cfg, paths)
    return {"points": len(points)}


# -- stage: report -------------------------------------------------------------------


def _per_patient_mtos(fusion_x: np.ndarray) -> list[list[Mto]]:
    return [
        [Mto.from_vector(row[19 * v : 19 * (v + 1)]) for v in range(4)] for row in fusion_x
    ]


def stage_report(cfg: ExperimentConfig) -> dict:
    paths = RunPaths(cfg.out)
    policy, _ = load_policy(_require(paths.triage_policy, "train-triage"))
    ids, fusion_x, data = _load_features(paths)
    records = _load_records(paths)
    by_id = {r.id: r for r in records}
    holdout = [by_id[i] for i in ids]

    with open(paths.agreement, "w") as f:
        f.write(agreement_table(holdout, data.rad_pred, data.clf_prob, threshold=policy.beta).to_csv())
    with open(paths.workload, "w") as f:
        f.write(workload_table(policy, holdout, data).to_csv())
    rows = density_variance_table(_per_patient_mtos(fusion_x), data.clf_prob, threshold=policy.beta)
    with open(paths.density_variance, "w") as f:
        f.write(table_to_csv(DENSITY_VARIANCE_COLUMNS, rows))

    # saliency for the machine's most confident malignant call (first patient
    # as a fallback when the holdout has no cancers)
    pos = np.flatnonzero(data.outcome == 1)
    pick = int(pos[np.argmax(data.clf_prob[pos])]) if pos.size else 0
    per_view_malig = fusion_x[pick, 1::19][:4]
    view = int(np.argmax(per_view_malig))
    per_view_net, _ = load_model(_require(paths.mtl_model, "train-mtl"))
    rec = _attach_images([holdout[pick]], os.path.dirname(paths.cohort_csv))[0]
    heat = saliency(per_view_net, rec.images[view])
    with open(paths.saliency_svg, "w") as f:
        f.write(plot_saliency(heat, np.asarray(rec.images[view])))
    _echo_config(cfg, paths)
    return {"saliency_patient": int(ids[pick]), "saliency_view": VIEW_NAMES[view]}


STAGES = (
    ("generate", stage_generate),
    ("train-mtl", stage_train_mtl),
    ("train-classifier", stage_train_classifier),
    ("train-triage", stage_train_triage),
    ("evaluate", stage_evaluate),
    ("sweep", stage_sweep),
    ("report", stage_report),
)


def run_all(cfg: ExperimentConfig) -> dict:
    out = {}
    for name, fn in STAGES:
        out[name] = fn(cfg)
    return out
