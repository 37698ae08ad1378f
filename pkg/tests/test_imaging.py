"""Image pipeline tests: forced-extreme transforms, Monte-Carlo bound checks,
CLAHE behavior on fixtures, noise statistics, resampling identities."""

from __future__ import annotations

import numpy as np
import pytest

from screentriage.imaging import (
    AugmentSpec,
    GeometryParams,
    apply_affine,
    augment_geometry,
    clahe,
    clahe_params,
    clip_histogram,
    draw_clahe_params,
    draw_geometry_params,
    full_pipeline,
    gaussian_noise,
    lanczos_downscale,
    read_pgm,
    shannon_entropy,
    standardize,
    standardize_with,
    write_pgm,
)

DISABLED = AugmentSpec(
    allow_hflip=False,
    allow_vflip=False,
    max_rotation=0.0,
    max_shear=0.0,
    max_zoom=0.0,
    max_shift=0.0,
    apply_clahe=False,
    noise_sigma=0.0,
)


def ramp_image(h=52, w=40, lo=0.45, hi=0.55):
    """Low-contrast diagonal ramp fixture."""
    rows = np.linspace(0.0, 1.0, h)[:, None]
    cols = np.linspace(0.0, 1.0, w)[None, :]
    return lo + (hi - lo) * (rows + cols) / 2.0


def textured_image(seed=0, h=52, w=40):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(size=(7, 6))
    up = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    return np.clip(0.3 + 0.4 * up + 0.05 * rng.standard_normal((h, w)), 0.0, 1.0)


class TestGeometry:
    def test_all_disabled_is_identity(self):
        img = textured_image(1)
        out = augment_geometry(img, DISABLED, seed=3)
        np.testing.assert_array_equal(out, img)

    def test_double_hflip_recovers_original(self):
        img = textured_image(2)
        flipped = apply_affine(img, GeometryParams(hflip=True))
        back = apply_affine(flipped, GeometryParams(hflip=True))
        np.testing.assert_allclose(back, img, atol=1e-12)

    def test_hflip_is_exact_mirror(self):
        img = textured_image(3)
        out = apply_affine(img, GeometryParams(hflip=True))
        np.testing.assert_allclose(out, img[:, ::-1], atol=1e-12)

    def test_vflip_is_exact_mirror(self):
        img = textured_image(4)
        out = apply_affine(img, GeometryParams(vflip=True))
        np.testing.assert_allclose(out, img[::-1, :], atol=1e-12)

    def test_rotation_bound_monte_carlo(self):
        spec = AugmentSpec()
        angles = []
        for seed in range(10_000):
            rng = np.random.default_rng(seed)
            p = draw_geometry_params(spec, rng, (52, 40))
            angles.append(p.rotation_deg)
        angles = np.asarray(angles)
        assert np.abs(angles).max() <= 20.0
        # The draw actually explores the range.
        assert np.abs(angles).max() > 19.0
        assert angles.min() < -19.0

    def test_all_draws_inside_bounds(self):
        spec = AugmentSpec()
        for seed in range(2000):
            rng = np.random.default_rng(seed)
            p = draw_geometry_params(spec, rng, (52, 40))
            assert abs(p.rotation_deg) <= spec.max_rotation
            assert abs(p.shear) <= spec.max_shear
            assert 1 - spec.max_zoom <= p.zoom <= 1 + spec.max_zoom
            assert abs(p.shift[0]) <= spec.max_shift * 40
            assert abs(p.shift[1]) <= spec.max_shift * 52

    def test_output_shape_and_determinism(self):
        img = textured_image(5)
        a = augment_geometry(img, AugmentSpec(), seed=11)
        b = augment_geometry(img, AugmentSpec(), seed=11)
        assert a.shape == img.shape
        np.testing.assert_array_equal(a, b)
        c = augment_geometry(img, AugmentSpec(), seed=12)
        assert np.any(c != a)


class TestClaheParams:
    def test_k8_bounds(self):
        # log2 8 = 3, so g = round(8 + a) with a in (-3, 3): g in [5, 11].
        gs = [clahe_params(8, 2.0, seed)[0] for seed in range(10_000)]
        assert min(gs) >= 5 and max(gs) <= 11
        assert 5 in gs and 11 in gs

    def test_forced_zero_offset_gives_nominal(self):
        class ZeroRng:
            def uniform(self, lo=0.0, hi=1.0):
                return (lo + hi) / 2.0

        g, c = draw_clahe_params(8, 2.0, ZeroRng())
        assert g == 8
        assert c == pytest.approx(2.0)

    def test_k2_clamped_to_two(self):
        gs = {clahe_params(2, 2.0, seed)[0] for seed in range(5000)}
        assert gs == {2, 3}

    def test_clip_stays_positive(self):
        cs = [clahe_params(8, 2.0, seed)[1] for seed in range(5000)]
        assert min(cs) > 0
        assert max(cs) <= 3.0 + 1e-12


class TestClahe:
    def test_constant_image_stays_constant(self):
        img = np.full((64, 64), 0.4)
        out = clahe(img, 8, 2.0)
        assert np.ptp(out) == 0.0

    def test_entropy_non_decrease_on_low_contrast_ramp(self):
        img = ramp_image()
        out = clahe(img, 4, 2.0)
        assert shannon_entropy(out) >= shannon_entropy(img)

    def test_clip_ceiling_enforced(self):
        hist = np.array([100.0, 3.0, 0.0, 50.0])
        clipped, excess = clip_histogram(hist, 10)
        assert clipped.max() <= 10
        assert excess == pytest.approx(100 - 10 + 50 - 10)
        assert clipped.sum() + excess == pytest.approx(hist.sum())

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="smaller than"):
            clahe(np.zeros((4, 4)), 8, 2.0)

    def test_output_range(self):
        img = textured_image(6)
        out = clahe(img, 5, 1.5)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestNoise:
    def test_sigma_zero_identity(self):
        img = textured_image(7)
        np.testing.assert_array_equal(gaussian_noise(img, 0.0, seed=1), img)

    def test_measured_sigma(self):
        img = np.full((100, 100), 0.5)
        out = gaussian_noise(img, 0.01, seed=2)
        measured = float((out - img).std())
        assert measured == pytest.approx(0.01, rel=0.05)

    def test_deterministic_per_seed(self):
        img = textured_image(8)
        np.testing.assert_array_equal(gaussian_noise(img, 0.01, seed=5), gaussian_noise(img, 0.01, seed=5))


class TestStandardize:
    def test_constant_to_zeros(self):
        np.testing.assert_array_equal(standardize(np.full((10, 10), 0.7)), np.zeros((10, 10)))

    def test_checkerboard(self):
        img = np.indices((8, 8)).sum(axis=0) % 2
        out = standardize(img.astype(float))
        np.testing.assert_allclose(np.unique(out), [-1.0, 1.0], atol=1e-12)

    def test_moments_and_idempotence(self):
        img = textured_image(9)
        out = standardize(img)
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9
        np.testing.assert_allclose(standardize(out), out, atol=1e-9)

    def test_dataset_level_variant(self):
        img = textured_image(10)
        out = standardize_with(img, 0.5, 0.25)
        np.testing.assert_allclose(out, (img - 0.5) / 0.25, atol=1e-12)


class TestLanczos:
    def test_constant_preserved(self):
        img = np.full((416, 320), 0.37)
        out = lanczos_downscale(img, 8)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_paper_scale_shape_and_aspect(self):
        img = np.zeros((416, 320))
        out = lanczos_downscale(img, 8)
        assert out.shape == (52, 40)
        # 320:416 = 40:52 = 1:1.3 preserved.
        assert out.shape[1] / out.shape[0] == pytest.approx(320 / 416)

    def test_dc_preservation_on_smooth_image(self):
        h, w = 416, 320
        rows = np.linspace(0, 1, h)[:, None]
        cols = np.linspace(0, 1, w)[None, :]
        img = 0.3 + 0.3 * rows + 0.2 * cols
        out = lanczos_downscale(img, 8)
        assert out.mean() == pytest.approx(img.mean(), abs=1e-3)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            lanczos_downscale(np.zeros((50, 41)), 8)


class TestFullPipeline:
    def test_everything_disabled_equals_standardize(self):
        img = textured_image(11)
        np.testing.assert_array_equal(full_pipeline(img, DISABLED, seed=0), standardize(img))

    def test_deterministic_per_seed(self):
        img = textured_image(12)
        spec = AugmentSpec()
        np.testing.assert_array_equal(full_pipeline(img, spec, seed=9), full_pipeline(img, spec, seed=9))

    def test_different_seeds_differ(self):
        img = textured_image(13)
        spec = AugmentSpec()
        assert np.any(full_pipeline(img, spec, seed=1) != full_pipeline(img, spec, seed=2))

    def test_output_standardized(self):
        img = textured_image(14)
        out = full_pipeline(img, AugmentSpec(), seed=3)
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9


class TestPgm:
    def test_round_trip_bytes(self, tmp_path):
        img = textured_image(15)
        p1 = tmp_path / "a.pgm"
        p2 = tmp_path / "b.pgm"
        write_pgm(p1, img)
        back = read_pgm(p1)
        write_pgm(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_and_values(self, tmp_path):
        img = np.array([[0.0, 1.0], [0.5, 0.25]])
        p = tmp_path / "t.pgm"
        write_pgm(p, img)
        raw = p.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        back = read_pgm(p)
        np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-12)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(ValueError, match="not a binary PGM"):
            read_pgm(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_bytes(b"P5\n4 4\n255\nab")
        with pytest.raises(ValueError, match="pixel bytes"):
            read_pgm(p)
