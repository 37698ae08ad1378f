"""Run the workload-minimizing triage search on a synthetic desk of patients.

The routing net scores every patient; the grid search varies the two error
penalties and sweeps the (alpha, beta) thresholds on a validation desk,
keeping only operating points whose false counts stay within the
radiologist's own. The printed curve shows the workload/error trade as the
alpha cut moves.
"""

import numpy as np

from screentriage.metrics import cohen_kappa, confusion, f1_score
from screentriage.triage import TriageData, curve_to_csv, operating_curve, train_triage


def synthetic_desk(rng, n, rad_err=0.10, clf_noise=0.35):
    """Patients whose features hint at who will get the call right."""
    outcome = rng.integers(0, 2, size=n)
    rad = np.where(rng.uniform(size=n) < rad_err, 1 - outcome, outcome)
    # classifier confidence correlates with a visible feature
    skill = rng.uniform(size=n)
    p_correct = 0.5 + 0.5 * skill
    clf_correct = rng.uniform(size=n) < p_correct
    clf_prob = np.where(
        clf_correct == (outcome == 1),
        rng.uniform(0.55, 0.95, size=n),
        rng.uniform(0.05, 0.45, size=n),
    )
    x = np.column_stack([skill, rng.normal(size=(n, 3)) * clf_noise])
    return TriageData(x=x, rad_pred=rad, clf_prob=clf_prob, outcome=outcome)


def main():
    rng = np.random.default_rng(17)
    train_data = synthetic_desk(rng, 400)
    val_data = synthetic_desk(rng, 200)

    policy, report = train_triage(train_data, val_data, delta=0.5, b_max=1.0, epochs=80, hidden=(16, 8))
    print(f"grid cells: {report['grid_cells']}, caps: fn<={report['fn_cap']:.0f} fp<={report['fp_cap']:.0f}")
    print(f"chosen: alpha={policy.alpha:.3f} beta={policy.beta:.3f} b_R={policy.b_r} b_C={policy.b_c}")
    print(f"validation selection: {report['selection']}")

    rad_counts = confusion(val_data.rad_pred.astype(float), val_data.outcome, 0.5)
    print(f"\nradiologist alone: kappa {cohen_kappa(rad_counts):.3f}, f1 {f1_score(rad_counts):.3f}")

    print("\noperating curve (validation desk):")
    print(curve_to_csv(operating_curve(policy, val_data)), end="")


if __name__ == "__main__":
    main()
