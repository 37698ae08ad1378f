"""Render one phantom patient per lesion category and save a contact sheet.

Each row of the sheet is one patient (four views, canonical order); the
printed table shows the attributes the simulated reader worked from. Lesion
contrast scales with conspicuity, so grade-0 findings are deliberately hard
to spot.
"""

import os

import numpy as np

from screentriage.cohort import SIGNS, default_strata, generate_cohort
from screentriage.imaging import write_pgm

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def first_with_sign(records, sign):
    for r in records:
        if r.sign == sign:
            return r
    return None


def main():
    records = generate_cohort(160, strata=default_strata(), seed=7)
    picks = [first_with_sign(records, s) for s in SIGNS]
    picks = [r for r in picks if r is not None]

    print(f"{'id':>5} {'sign':<22} {'consp':>5} {'susp':>4} {'outcome':>7} {'reader':>6} densities")
    for r in picks:
        dens = "/".join(f"{d:.0f}" for d in r.densities)
        print(
            f"{r.id:>5} {r.sign:<22} {r.conspicuity:>5} {r.suspicion:>4} "
            f"{r.outcome:>7} {r.rad_diagnosis:>6} {dens}"
        )

    h, w = picks[0].images[0].shape
    pad = 2
    sheet = np.ones((len(picks) * (h + pad) - pad, 4 * (w + pad) - pad))
    for i, r in enumerate(picks):
        for v in range(4):
            y, x = i * (h + pad), v * (w + pad)
            sheet[y : y + h, x : x + w] = r.images[v]
    path = os.path.join(OUT, "phantom_gallery.pgm")
    write_pgm(path, sheet)
    print(f"\nwrote {path} ({len(picks)} patients x 4 views)")


if __name__ == "__main__":
    main()
