"""Walk one view through the training-time image pipeline, step by step.

Shows the local-contrast gain from adaptive equalization (entropy before
and after), the randomized geometry, and the final standardized statistics
the per-view model actually consumes. Writes each intermediate as a PGM.
"""

import os

import numpy as np

from screentriage.cohort import generate_cohort
from screentriage.imaging import (
    AugmentSpec,
    apply_affine,
    clahe,
    draw_clahe_params,
    draw_geometry_params,
    gaussian_noise,
    shannon_entropy,
    standardize,
    write_pgm,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def save(name, img):
    lo, hi = img.min(), img.max()
    norm = (img - lo) / (hi - lo) if hi > lo else img * 0
    path = os.path.join(OUT, name)
    write_pgm(path, norm)
    print(f"  -> {path}")


def main():
    rec = generate_cohort(12, seed=3)[4]
    img = rec.images[0]
    spec = AugmentSpec()
    rng = np.random.default_rng(2024)

    print(f"patient {rec.id}: sign={rec.sign} conspicuity={rec.conspicuity}")
    print(f"raw: entropy {shannon_entropy(img):.3f} bits")
    save("step0_raw.pgm", img)

    geo = draw_geometry_params(spec, rng, img.shape)
    warped = apply_affine(img, geo)
    print("affine: flip/rotate/shear/zoom/shift drawn from the augment ranges")
    save("step1_affine.pgm", warped)

    g, c = draw_clahe_params(spec.clahe_grid, spec.clahe_clip, rng)
    eq = clahe(warped, g, c)
    print(f"clahe (grid {g}, clip {c:.2f}): entropy {shannon_entropy(warped):.3f} -> {shannon_entropy(eq):.3f}")
    save("step2_clahe.pgm", eq)

    noisy = gaussian_noise(eq, spec.noise_sigma, rng=rng)
    print(f"noise: sigma {spec.noise_sigma}")
    save("step3_noise.pgm", noisy)

    final = standardize(noisy)
    print(f"standardized: mean {final.mean():+.2e}, std {final.std():.3f}")


if __name__ == "__main__":
    main()
