"""Drive every pipeline stage on a reduced cohort and tour the artifacts.

Same orchestration as the command line (`screentriage --config ... all`),
called as a library. The reduced sizes keep this under a minute; the
standard configuration is just `ExperimentConfig()` with an output path.
"""

import json
import os

from screentriage.config import ExperimentConfig
from screentriage.pipeline import STAGES, RunPaths

OUT = os.path.join(os.path.dirname(__file__), "out", "mini_run")


def main():
    cfg = ExperimentConfig(
        out=OUT,
        cohort_n=240,
        holdout=60,
        mtl_hidden=(32, 16),
        mtl_stages=((0.01, 3), (0.001, 5)),
        fusion_hidden=(32, 16),
        fusion_stages=((0.01, 3), (0.001, 6)),
        tta_n=4,
        triage_epochs=60,
        triage_hidden=(16, 8),
        triage_b_max=1.0,
        triage_delta=0.5,
    )
    for name, fn in STAGES:
        result = fn(cfg)
        brief = json.dumps(result, default=str)
        print(f"{name:<16} {brief[:110]}")

    paths = RunPaths(cfg.out)
    print("\nartifacts:")
    for f in sorted(os.listdir(cfg.out)):
        if f != "images":
            print(f"  {f}")
    with open(paths.summary) as fh:
        s = json.load(fh)
    print(
        f"\nholdout: {100 * s['frac_to_radiologist']:.1f}% to radiologist, "
        f"system kappa {s['system']['kappa']:.3f} vs radiologist {s['radiologist']['kappa']:.3f}"
    )


if __name__ == "__main__":
    main()
