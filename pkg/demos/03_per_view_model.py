"""Train the per-view multi-task model on a small cohort and read one output.

The model maps one standardized view to a 19-value output: malignancy
softmax, lesion sign, suspicion grade, conspicuity grade, plus density and
age regressions. Training uses the staged learning rates with per-epoch
re-augmentation; the printed history shows the validation AUROC the
checkpoint selection tracks.
"""

import numpy as np

from screentriage.cohort import SIGNS, generate_cohort
from screentriage.mtlnet import (
    MtlArch,
    MultiTaskNet,
    TrainSchedule,
    ViewSamples,
    normalize_age,
    predict_tta,
    prepare_view_vector,
    train,
)


def to_view_samples(records):
    sign_idx = {s: i for i, s in enumerate(SIGNS)}
    rows = [(r, v) for r in records for v in range(4)]
    return ViewSamples(
        x=np.stack([prepare_view_vector(r.images[v]) for r, v in rows]),
        diagnosis=np.array([r.outcome for r, _ in rows]),
        sign=np.array([sign_idx[r.sign] for r, _ in rows]),
        suspicion=np.array([r.suspicion for r, _ in rows]),
        conspicuity=np.array([r.conspicuity for r, _ in rows]),
        density=np.array([r.densities[v] / 100.0 for r, v in rows]),
        age=np.array([normalize_age(r.age) for r, _ in rows]),
    )


def main():
    records = generate_cohort(90, seed=11)
    train_s = to_view_samples(records[:70])
    val_s = to_view_samples(records[70:])

    net = MultiTaskNet.init(MtlArch(hidden=(32, 16)), seed=0)
    schedule = TrainSchedule(stages=((0.01, 3), (0.001, 5)), batch_size=16, seed=0)
    best, history = train(net, train_s, val_s, schedule)

    print("epoch  lr      train_loss  val_auroc")
    for h in history:
        print(f"{h['epoch']:>5}  {h['lr']:<7g} {h['train_loss']:>10.4f}  {h['val_auroc']:.3f}")

    rec = records[-1]
    mto = predict_tta(best, rec.images[0], n=16, seed=5)
    print(f"\npatient {rec.id} (outcome={rec.outcome}, annotated sign={rec.sign}):")
    print(f"  malignancy       {mto.malignancy:.3f}")
    print(f"  sign argmax      {SIGNS[int(np.argmax(mto.sign))]}")
    print(f"  suspicion probs  {np.array2string(mto.suspicion, precision=2)}")
    print(f"  density pred     {mto.density * 100:.1f} (annotated {rec.densities[0]:.1f})")
    print(f"  age pred         {40 + 33 * mto.age:.1f} (true {rec.age:.1f})")


if __name__ == "__main__":
    main()
