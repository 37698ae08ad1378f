"""Cohort engine tests: phantom determinism and label faithfulness, reader
calibration Monte Carlo, strata marginals, partition arithmetic, CSV round trips."""

from __future__ import annotations

import os

import numpy as np
import pytest

from screentriage.cohort import (
    IMAGE_SHAPE,
    SIGNS,
    Partition,
    PatientTruth,
    PhantomSpec,
    ReaderProfile,
    SplitSpec,
    StrataConfig,
    default_reader_profile,
    default_strata,
    generate_cohort,
    generate_phantom,
    load_cohort,
    partition,
    sample_attributes,
    save_cohort,
    simulate_radiologist,
    suspicion_rule,
)

FIXTURE_CSV = os.path.join(os.path.dirname(__file__), "fixtures", "cohort3", "cohort.csv")


def make_truth(
    index=0,
    outcome=0,
    age=55.0,
    family_history=0,
    recall_type="one-reader",
    sign="none",
    conspicuity=1,
    base_density=40.0,
    view_densities=(40.0, 41.0, 39.0, 40.5),
):
    return PatientTruth(
        index=index,
        outcome=outcome,
        age=age,
        family_history=family_history,
        recall_type=recall_type,
        sign=sign,
        conspicuity=conspicuity,
        base_density=base_density,
        view_densities=view_densities,
    )


class TestPhantom:
    def test_shape_and_range(self):
        img, mask = generate_phantom(PhantomSpec(40.0, "circumscribed", 2, True, seed=1))
        assert img.shape == IMAGE_SHAPE
        assert mask.shape == IMAGE_SHAPE
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_no_sign_means_empty_mask(self):
        _, mask = generate_phantom(PhantomSpec(40.0, "none", 2, False, seed=2))
        assert not mask.any()

    def test_every_lesion_sign_marks_a_mask(self):
        for sign in SIGNS[1:]:
            _, mask = generate_phantom(PhantomSpec(50.0, sign, 3, True, seed=3))
            assert mask.any(), sign

    def test_deterministic_per_seed(self):
        spec = PhantomSpec(55.0, "spiculated", 2, True, seed=9)
        a, ma = generate_phantom(spec)
        b, mb = generate_phantom(spec)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ma, mb)
        c, _ = generate_phantom(PhantomSpec(55.0, "spiculated", 2, True, seed=10))
        assert np.any(c != a)

    def test_bright_fraction_monotone_in_density(self):
        fractions = []
        for d in (10.0, 40.0, 70.0, 95.0):
            vals = []
            for seed in range(20):
                img, _ = generate_phantom(PhantomSpec(d, "none", 0, False, seed=seed))
                vals.append(float((img > 0.5).mean()))
            fractions.append(np.mean(vals))
        assert all(a < b for a, b in zip(fractions, fractions[1:]))

    def test_conspicuity_scales_lesion_contrast(self):
        deltas = []
        for consp in range(4):
            diffs = []
            for seed in range(25):
                spec = PhantomSpec(40.0, "circumscribed", consp, True, seed=seed)
                img, mask = generate_phantom(spec)
                base, _ = generate_phantom(PhantomSpec(40.0, "none", consp, False, seed=seed))
                diffs.append(float(img[mask].mean() - base[mask].mean()))
            deltas.append(np.mean(diffs))
        assert all(a < b for a, b in zip(deltas, deltas[1:]))

    def test_density_label_faithfulness_rank_correlation(self):
        # Brute-force bright-pixel fraction must rank-predict the density label.
        rng = np.random.default_rng(0)
        densities = rng.uniform(2.0, 98.0, size=120)
        fracs = []
        for i, d in enumerate(densities):
            img, _ = generate_phantom(PhantomSpec(float(d), "none", 0, False, seed=1000 + i))
            fracs.append(float((img > 0.5).mean()))

        def ranks(v):
            r = np.empty(len(v))
            r[np.argsort(v)] = np.arange(len(v))
            return r

        rd, rf = ranks(densities), ranks(np.asarray(fracs))
        rho = float(np.corrcoef(rd, rf)[0, 1])
        assert rho > 0.9


class TestSuspicionRule:
    def test_monotone_in_conspicuity(self):
        for outcome in (0, 1):
            vals = [suspicion_rule("spiculated", c, outcome) for c in range(4)]
            assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_malignant_above_benign(self):
        for c in range(4):
            assert suspicion_rule("spiculated", c, 1) > suspicion_rule("spiculated", c, 0)


class TestSimulatedRadiologist:
    def test_zero_rates_reproduce_outcome(self):
        profile = default_reader_profile()
        zero = ReaderProfile(
            fnr={k: 0.0 for k in profile.fnr},
            fpr={k: 0.0 for k in profile.fpr},
            density_bins=profile.density_bins,
        )
        for seed in range(50):
            outcome = seed % 2
            rad, _ = simulate_radiologist(make_truth(outcome=outcome), zero, seed)
            assert rad == outcome

    def test_fnr_one_misses_all_positives(self):
        profile = default_reader_profile()
        blind = ReaderProfile(
            fnr={k: 1.0 for k in profile.fnr},
            fpr={k: 0.0 for k in profile.fpr},
            density_bins=profile.density_bins,
        )
        for seed in range(50):
            rad, _ = simulate_radiologist(make_truth(outcome=1), blind, seed)
            assert rad == 0

    def test_unknown_stratum_rejected(self):
        profile = default_reader_profile()
        broken = ReaderProfile(
            fnr={(0, 0, 0): 0.1}, fpr={(0, 0, 0): 0.1}, density_bins=profile.density_bins
        )
        with pytest.raises(ValueError, match="unknown stratum"):
            simulate_radiologist(make_truth(conspicuity=3), broken, 0)

    def test_default_profile_aggregate_calibration(self):
        # Law of large numbers at n=1e5: aggregates near 36/156 and 42/844.
        strata = default_strata()
        profile = default_reader_profile(strata)
        truths = sample_attributes(100_000, strata, seed=123)
        fn = fp = pos = neg = 0
        for i, t in enumerate(truths):
            rad, _ = simulate_radiologist(t, profile, seed=5_000_000 + i)
            if t.outcome == 1:
                pos += 1
                fn += rad == 0
            else:
                neg += 1
                fp += rad == 1
        assert fn / pos == pytest.approx(36 / 156, abs=0.01)
        assert fp / neg == pytest.approx(42 / 844, abs=0.005)

    def test_annotation_noise_is_bounded_and_seeded(self):
        profile = default_reader_profile()
        t = make_truth(outcome=1, sign="spiculated", conspicuity=2)
        rad1, ann1 = simulate_radiologist(t, profile, seed=7)
        rad2, ann2 = simulate_radiologist(t, profile, seed=7)
        assert (rad1, ann1) == (rad2, ann2)
        assert 0 <= ann1.suspicion <= 4
        assert 0 <= ann1.conspicuity <= 3


class TestCohortAssembly:
    def test_prevalence_within_3_sigma(self):
        strata = default_strata()
        truths = sample_attributes(8162, strata, seed=11)
        k = sum(t.outcome for t in truths)
        p = strata.prevalence
        sigma = np.sqrt(p * (1 - p) * 8162)
        assert abs(k - p * 8162) <= 3 * sigma

    def test_age_bin_marginal(self):
        records = generate_cohort(4000, seed=5, render=False)
        in_bin = sum(1 for r in records if 50.0 <= r.age < 60.0) / len(records)
        assert in_bin == pytest.approx(0.59, abs=0.02)

    def test_all_strata_marginals_within_3_sigma(self):
        strata = default_strata()
        n = 20_000
        truths = sample_attributes(n, strata, seed=17)
        mal = [t for t in truths if t.outcome == 1]
        ben = [t for t in truths if t.outcome == 0]

        def check(values, probs, extractor, pop):
            m = len(pop)
            for b, p_expect in enumerate(probs):
                if p_expect == 0.0:
                    assert sum(1 for t in pop if extractor(t) == b) == 0
                    continue
                k = sum(1 for t in pop if extractor(t) == b)
                sigma = np.sqrt(p_expect * (1 - p_expect) * m)
                assert abs(k - p_expect * m) <= 3 * sigma, (values, b)

        def age_bin(t):
            for b, (lo, hi) in enumerate(strata.age_bins):
                if lo <= t.age < hi or (b == len(strata.age_bins) - 1 and t.age == hi):
                    return b

        def density_bin(t):
            for b, (lo, hi) in enumerate(strata.density_bins):
                if lo <= t.base_density < hi or (b == len(strata.density_bins) - 1 and t.base_density == hi):
                    return b

        check("age|mal", strata.age_given_cancer, age_bin, mal)
        check("age|ben", strata.age_given_benign, age_bin, ben)
        check("density|mal", strata.density_given_cancer, density_bin, mal)
        check("density|ben", strata.density_given_benign, density_bin, ben)
        check("sign|mal", strata.sign_given_cancer, lambda t: SIGNS.index(t.sign), mal)
        check("sign|ben", strata.sign_given_benign, lambda t: SIGNS.index(t.sign), ben)
        check("consp|mal", strata.conspicuity_given_cancer, lambda t: t.conspicuity, mal)
        check("consp|ben", strata.conspicuity_given_benign, lambda t: t.conspicuity, ben)

    def test_one_hot_bin_concentrates_everyone(self):
        strata = default_strata()
        one_hot = StrataConfig(
            prevalence=strata.prevalence,
            age_bins=strata.age_bins,
            age_given_cancer=(0.0, 1.0, 0.0, 0.0),
            age_given_benign=(0.0, 1.0, 0.0, 0.0),
            density_bins=strata.density_bins,
            density_given_cancer=strata.density_given_cancer,
            density_given_benign=strata.density_given_benign,
            sign_given_cancer=strata.sign_given_cancer,
            sign_given_benign=strata.sign_given_benign,
            conspicuity_given_cancer=strata.conspicuity_given_cancer,
            conspicuity_given_benign=strata.conspicuity_given_benign,
            family_history_rate=strata.family_history_rate,
            recall_probs=strata.recall_probs,
        )
        truths = sample_attributes(500, one_hot, seed=3)
        assert all(50.0 <= t.age < 60.0 for t in truths)

    def test_invalid_proportions_rejected(self):
        strata = default_strata()
        with pytest.raises(ValueError, match="must sum to 1"):
            StrataConfig(
                prevalence=strata.prevalence,
                age_bins=strata.age_bins,
                age_given_cancer=(0.5, 0.2, 0.2, 0.2),
                age_given_benign=strata.age_given_benign,
                density_bins=strata.density_bins,
                density_given_cancer=strata.density_given_cancer,
                density_given_benign=strata.density_given_benign,
                sign_given_cancer=strata.sign_given_cancer,
                sign_given_benign=strata.sign_given_benign,
                conspicuity_given_cancer=strata.conspicuity_given_cancer,
                conspicuity_given_benign=strata.conspicuity_given_benign,
                family_history_rate=strata.family_history_rate,
                recall_probs=strata.recall_probs,
            )

    def test_generation_is_deterministic(self):
        a = generate_cohort(20, seed=21)
        b = generate_cohort(20, seed=21)
        for ra, rb in zip(a, b):
            assert ra.age == rb.age
            assert ra.sign == rb.sign
            assert ra.rad_diagnosis == rb.rad_diagnosis
            for va, vb in zip(ra.images, rb.images):
                np.testing.assert_array_equal(va, vb)

    def test_suspicion_correlates_with_outcome(self):
        records = generate_cohort(3000, seed=9, render=False)
        s_mal = np.mean([r.suspicion for r in records if r.outcome == 1])
        s_ben = np.mean([r.suspicion for r in records if r.outcome == 0])
        assert s_mal > s_ben + 1.0

    def test_malignant_cross_view_spread_exceeds_benign(self):
        records = generate_cohort(3000, seed=13, render=False)
        var_mal = np.mean([np.var(r.densities) for r in records if r.outcome == 1])
        var_ben = np.mean([np.var(r.densities) for r in records if r.outcome == 0])
        assert var_mal > var_ben


class TestPartition:
    def test_reference_sizes(self):
        # floor rule on 7162 non-holdout: 4297.2 -> 4297 (+1 residue), 1074.3,
        # 1074.3, 716.2 -> {4298, 1074, 1074, 716}.
        p = partition(8162, SplitSpec(seed=4))
        assert p.stage1.size == 4298
        assert p.stage2.size == 1074
        assert p.stage3.size == 1074
        assert p.validation.size == 716
        assert p.holdout.size == 1000

    def test_disjoint_cover(self):
        p = partition(500, SplitSpec(holdout=100, seed=1))
        all_idx = np.concatenate([p.stage1, p.stage2, p.stage3, p.validation, p.holdout])
        assert all_idx.size == 500
        assert np.array_equal(np.sort(all_idx), np.arange(500))

    def test_deterministic(self):
        a = partition(300, SplitSpec(holdout=50, seed=8))
        b = partition(300, SplitSpec(holdout=50, seed=8))
        for pa, pb in zip(a.parts().values(), b.parts().values()):
            np.testing.assert_array_equal(pa, pb)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            partition(10, SplitSpec(holdout=1000, seed=0))
        with pytest.raises(ValueError, match="too small"):
            partition(3, SplitSpec(fractions=(0.97, 0.01, 0.01, 0.01), holdout=1, seed=0))


class TestPersistence:
    def test_save_load_save_byte_identical(self, tmp_path):
        records = generate_cohort(6, seed=30)
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        p1 = save_cohort(records, d1)
        loaded = load_cohort(p1)
        p2 = save_cohort(loaded, d2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        for rec in loaded:
            for v, view in enumerate(("mlo_r", "mlo_l", "cc_r", "cc_l")):
                f1 = d1 / "images" / f"p{rec.id:06d}_{view}.pgm"
                f2 = d2 / "images" / f"p{rec.id:06d}_{view}.pgm"
                assert f1.read_bytes() == f2.read_bytes()

    def test_fixture_parses_to_expected_records(self):
        records = load_cohort(FIXTURE_CSV)
        assert len(records) == 3
        r0, r1, r2 = records
        assert (r0.id, r0.age, r0.family_history, r0.recall_type) == (0, 52.5, 0, "one-reader")
        assert r0.densities == (30.1, 32.4, 29.8, 31.0)
        assert (r0.sign, r0.suspicion, r0.conspicuity) == ("none", 0, 1)
        assert (r0.outcome, r0.rad_diagnosis) == (0, 0)
        np.testing.assert_allclose(r0.images[0], np.full((4, 4), round(0.1 * 255) / 255))
        assert (r1.sign, r1.outcome, r1.rad_diagnosis) == ("spiculated", 1, 1)
        assert r1.age == 67.25
        assert (r2.recall_type, r2.rad_diagnosis) == ("arbitration", 1)

    def test_missing_column_named(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,age\n1,50\n")
        with pytest.raises(ValueError, match="missing columns"):
            load_cohort(bad)

    def test_malformed_row_reports_line_number(self, tmp_path):
        lines = open(FIXTURE_CSV).read().splitlines()
        lines[2] = lines[2].replace("67.25", "not-a-number")
        bad = tmp_path / "cohort.csv"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="row 3"):
            load_cohort(bad, load_images=False)
