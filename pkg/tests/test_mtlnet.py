"""Per-view multi-task network: gradients against finite differences,
training behavior, test-time augmentation, persistence."""

import numpy as np
import pytest

from screentriage.imaging import AugmentSpec, clahe, full_pipeline, standardize
from screentriage.losses import FocalParams, TaskWeights
from screentriage.metrics import auroc
from screentriage.mtlnet import (
    HEAD_LAYOUT,
    MTO_SIZE,
    MtlArch,
    Mto,
    MultiTaskNet,
    TrainSchedule,
    ViewSamples,
    denormalize_age,
    diagnosis_class_weights,
    load_model,
    normalize_age,
    predict_tta,
    prepare_view_vector,
    save_model,
    train,
    train_step,
)
from screentriage.netcore import mix_seed


def tiny_net(seed=0, input_size=12, hidden=(8, 6), dropout=0.0):
    return MultiTaskNet.init(MtlArch(input_size=input_size, hidden=hidden, dropout=dropout), seed=seed)


def random_batch(rng, n, input_size=12):
    return ViewSamples(
        x=rng.normal(size=(n, input_size)),
        diagnosis=rng.integers(0, 2, size=n),
        sign=rng.integers(0, 6, size=n),
        suspicion=rng.integers(0, 5, size=n),
        conspicuity=rng.integers(0, 4, size=n),
        density=rng.uniform(0.05, 0.95, size=n),
        age=rng.uniform(0.05, 0.95, size=n),
    )


# -- output container ---------------------------------------------------------


def test_mto_size_is_19():
    assert MTO_SIZE == 19
    assert [dim for _, dim in HEAD_LAYOUT] == [2, 6, 5, 4, 1, 1]


def test_mto_vector_round_trip():
    m = Mto(
        diagnosis=np.array([0.3, 0.7]),
        sign=np.full(6, 1 / 6),
        suspicion=np.full(5, 0.2),
        conspicuity=np.full(4, 0.25),
        density=0.4,
        age=0.6,
    )
    v = m.vector()
    assert v.shape == (19,)
    m2 = Mto.from_vector(v)
    assert np.allclose(m2.vector(), v)
    assert m.malignancy == pytest.approx(0.7)


def test_mto_rejects_non_simplex():
    with pytest.raises(ValueError, match="simplex"):
        Mto(
            diagnosis=np.array([0.5, 0.6]),
            sign=np.full(6, 1 / 6),
            suspicion=np.full(5, 0.2),
            conspicuity=np.full(4, 0.25),
            density=0.4,
            age=0.6,
        )


def test_mto_rejects_out_of_range_regression():
    with pytest.raises(ValueError, match="density"):
        Mto(
            diagnosis=np.array([0.5, 0.5]),
            sign=np.full(6, 1 / 6),
            suspicion=np.full(5, 0.2),
            conspicuity=np.full(4, 0.25),
            density=1.2,
            age=0.6,
        )


def test_mto_from_vector_wrong_length():
    with pytest.raises(ValueError, match="19"):
        Mto.from_vector(np.zeros(18))


def test_age_normalization_round_trip():
    for age in (40.0, 55.5, 73.0):
        assert denormalize_age(normalize_age(age)) == pytest.approx(age)
    assert normalize_age(40.0) == 0.0
    assert normalize_age(73.0) == pytest.approx(1.0)


# -- forward pass --------------------------------------------------------------


def test_forward_outputs_valid_mto():
    net = tiny_net()
    m = net.forward(np.random.default_rng(1).normal(size=12))
    assert isinstance(m, Mto)
    assert m.diagnosis.sum() == pytest.approx(1.0)


def test_forward_dim_mismatch():
    net = tiny_net()
    with pytest.raises(ValueError, match="dimension mismatch"):
        net.forward(np.zeros(13))


def test_zero_heads_give_uniform_outputs():
    net = tiny_net()
    for name, dim in HEAD_LAYOUT:
        w, b = net.heads[name]
        w[:] = 0.0
        b[:] = 0.0
    m = net.forward(np.random.default_rng(2).normal(size=12))
    assert np.allclose(m.diagnosis, 0.5)
    assert np.allclose(m.sign, 1 / 6)
    assert np.allclose(m.suspicion, 0.2)
    assert np.allclose(m.conspicuity, 0.25)
    assert m.density == pytest.approx(0.5)
    assert m.age == pytest.approx(0.5)


# -- gradient oracle -----------------------------------------------------------


def finite_diff_check(net, batch, weights, fp, class_weights=None, h=1e-6):
    """Max relative error of analytic grads vs central differences, all entries."""
    _, _, grads = net.loss_and_grads(batch, weights, fp, class_weights)
    params = net.params()
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp, _, _ = net.loss_and_grads(batch, weights, fp, class_weights)
            flat_p[i] = orig - h
            lm, _, _ = net.loss_and_grads(batch, weights, fp, class_weights)
            flat_p[i] = orig
            num = (lp - lm) / (2 * h)
            denom = max(abs(num), abs(flat_g[i]), 1e-4)
            worst = max(worst, abs(num - flat_g[i]) / denom)
    return worst


def test_gradients_match_finite_differences():
    net = tiny_net(seed=7)
    batch = random_batch(np.random.default_rng(3), n=3)
    err = finite_diff_check(net, batch, TaskWeights(), FocalParams())
    assert err < 1e-4, f"worst relative gradient error {err:.2e}"


def test_gradients_match_with_class_weights():
    net = tiny_net(seed=11)
    batch = random_batch(np.random.default_rng(5), n=4)
    cw = np.array([2.0, 0.5, 1.5, 1.0])
    err = finite_diff_check(net, batch, TaskWeights(), FocalParams(), class_weights=cw)
    assert err < 1e-4, f"worst relative gradient error {err:.2e}"


def test_gradients_match_with_uneven_task_weights():
    net = tiny_net(seed=13)
    batch = random_batch(np.random.default_rng(8), n=3)
    w = TaskWeights(diagnosis=1.0, sign=0.3, suspicion=0.1, conspicuity=0.25, density=0.2, age=0.05)
    err = finite_diff_check(net, batch, w, FocalParams(alpha=1.5, gamma=3.0))
    assert err < 1e-4, f"worst relative gradient error {err:.2e}"


def test_zero_task_weight_zeroes_head_gradient():
    net = tiny_net(seed=4)
    batch = random_batch(np.random.default_rng(4), n=5)
    w = TaskWeights(sign=0.0)
    _, _, grads = net.loss_and_grads(batch, w, FocalParams())
    base = 2 * len(net.core.weights)
    names = [name for name, _ in HEAD_LAYOUT]
    sign_at = base + 2 * names.index("sign")
    assert np.all(grads[sign_at] == 0.0)
    assert np.all(grads[sign_at + 1] == 0.0)
    diag_at = base + 2 * names.index("diagnosis")
    assert np.any(grads[diag_at] != 0.0)


def test_diagnosis_class_weight_scales_task_loss():
    net = tiny_net(seed=9)
    batch = random_batch(np.random.default_rng(9), n=6)
    _, per1, _ = net.loss_and_grads(batch, TaskWeights(), FocalParams(), np.ones(6))
    _, per2, _ = net.loss_and_grads(batch, TaskWeights(), FocalParams(), np.full(6, 2.0))
    assert per2["diagnosis"] == pytest.approx(2 * per1["diagnosis"])
    assert per2["sign"] == pytest.approx(per1["sign"])


# -- train step ----------------------------------------------------------------


def test_train_step_zero_lr_keeps_params():
    net = tiny_net(seed=2)
    batch = random_batch(np.random.default_rng(2), n=4)
    before = [p.copy() for p in net.params()]
    train_step(net, batch, TaskWeights(), FocalParams(), lr=0.0)
    for b, p in zip(before, net.params()):
        assert np.array_equal(b, p)


def test_train_step_descends():
    net = tiny_net(seed=3)
    batch = random_batch(np.random.default_rng(6), n=8)
    l0, _, _ = net.loss_and_grads(batch, TaskWeights(), FocalParams())
    for _ in range(5):
        train_step(net, batch, TaskWeights(), FocalParams(), lr=1e-3)
    l1, _, _ = net.loss_and_grads(batch, TaskWeights(), FocalParams())
    assert l1 < l0


def test_train_step_raises_on_divergence():
    net = tiny_net(seed=5)
    net.core.weights[0][:] = np.nan
    batch = random_batch(np.random.default_rng(7), n=2)
    with pytest.raises(ValueError, match="diverged"):
        train_step(net, batch, TaskWeights(), FocalParams(), lr=1e-3)


# -- schedule / class weights ----------------------------------------------------


def test_schedule_rejects_increasing_rates():
    with pytest.raises(ValueError, match="non-increasing"):
        TrainSchedule(stages=((1e-3, 5), (1e-2, 5)))


def test_schedule_rejects_nonpositive_rate():
    with pytest.raises(ValueError, match="positive"):
        TrainSchedule(stages=((0.0, 5),))


def test_schedule_total_epochs():
    assert TrainSchedule(stages=((1e-2, 3), (1e-3, 4))).total_epochs == 7


def test_diagnosis_class_weights_inverse_frequency():
    w = diagnosis_class_weights(np.array([0, 0, 0, 1]))
    assert w == pytest.approx([4 / 6, 4 / 2])
    # weighted sample mean is 1: (3 * 2/3 + 1 * 2) / 4
    assert np.mean(w[np.array([0, 0, 0, 1])]) == pytest.approx(1.0)
    assert diagnosis_class_weights(np.zeros(5, dtype=int)) == pytest.approx([1.0, 1.0])


def test_viewsamples_validates_lengths():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="length"):
        ViewSamples(
            x=rng.normal(size=(4, 12)),
            diagnosis=np.zeros(3, dtype=int),
            sign=np.zeros(4, dtype=int),
            suspicion=np.zeros(4, dtype=int),
            conspicuity=np.zeros(4, dtype=int),
            density=np.zeros(4),
            age=np.zeros(4),
        )


# -- full training loop ----------------------------------------------------------


def separable_data(rng, n, input_size=12):
    d = random_batch(rng, n, input_size)
    d.diagnosis = (d.x[:, 0] > 0).astype(int)
    return d


def test_train_learns_separable_diagnosis():
    rng = np.random.default_rng(42)
    tr = separable_data(rng, 160)
    va = separable_data(rng, 80)
    net = tiny_net(seed=1)
    sched = TrainSchedule(stages=((0.05, 8), (0.01, 8)), batch_size=16, seed=0)
    best, history = train(net, tr, va, sched)
    assert len(history) == sched.total_epochs
    out, _ = best.forward_batch(va.x)
    assert auroc(out["diagnosis"][:, 1], va.diagnosis) >= 0.95


def test_train_checkpoint_is_best_epoch():
    rng = np.random.default_rng(10)
    tr = separable_data(rng, 96)
    va = separable_data(rng, 48)
    net = tiny_net(seed=6, dropout=0.2)
    sched = TrainSchedule(stages=((0.05, 6),), batch_size=16, seed=3)
    best, history = train(net, tr, va, sched)
    out, _ = best.forward_batch(va.x)
    assert auroc(out["diagnosis"][:, 1], va.diagnosis) == pytest.approx(
        max(h["val_auroc"] for h in history)
    )


def test_train_is_deterministic_given_seed():
    rng = np.random.default_rng(20)
    tr = separable_data(rng, 64)
    va = separable_data(rng, 32)
    sched = TrainSchedule(stages=((0.03, 4),), batch_size=16, seed=5)
    b1, h1 = train(tiny_net(seed=8, dropout=0.2), tr, va, sched)
    b2, h2 = train(tiny_net(seed=8, dropout=0.2), tr, va, sched)
    assert h1 == h2
    for p1, p2 in zip(b1.params(), b2.params()):
        assert np.array_equal(p1, p2)


def test_train_rejects_empty_split():
    rng = np.random.default_rng(0)
    d = random_batch(rng, 4)
    empty = d.take(np.array([], dtype=int))
    with pytest.raises(ValueError, match="empty split"):
        train(tiny_net(), d, empty, TrainSchedule(stages=((0.01, 1),)))


def test_history_records_stage_rates():
    rng = np.random.default_rng(30)
    tr = separable_data(rng, 32)
    va = separable_data(rng, 16)
    sched = TrainSchedule(stages=((0.05, 2), (0.005, 3)), batch_size=16, seed=1)
    _, history = train(tiny_net(seed=2), tr, va, sched)
    assert [h["lr"] for h in history] == [0.05, 0.05, 0.005, 0.005, 0.005]
    assert [h["epoch"] for h in history] == list(range(5))


# -- test-time augmentation --------------------------------------------------------


IDENTITY_AUG = AugmentSpec(
    allow_hflip=False,
    allow_vflip=False,
    max_rotation=0.0,
    max_shear=0.0,
    max_zoom=0.0,
    max_shift=0.0,
    apply_clahe=False,
    noise_sigma=0.0,
)


def test_tta_n1_identity_equals_plain_forward():
    net = tiny_net(seed=3, input_size=48)
    img = np.random.default_rng(11).uniform(size=(8, 6))
    got = predict_tta(net, img, n=1, augmenter=IDENTITY_AUG, seed=9)
    want = net.forward(standardize(img).ravel())
    assert np.allclose(got.vector(), want.vector())


def test_tta_default_count_is_100():
    import inspect

    assert inspect.signature(predict_tta).parameters["n"].default == 100


def test_tta_matches_manual_mean():
    net = tiny_net(seed=4, input_size=48)
    img = np.random.default_rng(12).uniform(size=(8, 6))
    spec = AugmentSpec(apply_clahe=False, noise_sigma=0.02)
    got = predict_tta(net, img, n=3, augmenter=spec, seed=77)
    acc = np.zeros(19)
    for k in range(3):
        aug = full_pipeline(img, spec, seed=mix_seed(77, k))
        acc += net.forward(aug.ravel()).vector()
    assert np.allclose(got.vector(), acc / 3)


def test_tta_output_is_valid_mto():
    net = tiny_net(seed=5, input_size=48)
    img = np.random.default_rng(13).uniform(size=(8, 6))
    m = predict_tta(net, img, n=4, augmenter=AugmentSpec(apply_clahe=False), seed=1)
    assert m.diagnosis.sum() == pytest.approx(1.0)
    assert m.sign.sum() == pytest.approx(1.0)


def test_tta_averaging_reduces_variance():
    net = tiny_net(seed=6, input_size=48)
    img = np.random.default_rng(16).uniform(size=(8, 6))
    spec = AugmentSpec(apply_clahe=False, noise_sigma=0.05)
    singles = [predict_tta(net, img, n=1, augmenter=spec, seed=s).malignancy for s in range(24)]
    averaged = [predict_tta(net, img, n=8, augmenter=spec, seed=1000 + s).malignancy for s in range(24)]
    assert np.std(averaged) < np.std(singles)


def test_tta_rejects_zero_draws():
    net = tiny_net(input_size=48)
    with pytest.raises(ValueError, match=">= 1"):
        predict_tta(net, np.zeros((8, 6)), n=0)


def test_prepare_view_vector_applies_nominal_clahe():
    img = np.random.default_rng(14).uniform(size=(20, 26))
    spec = AugmentSpec()
    want = standardize(clahe(img, spec.clahe_grid, spec.clahe_clip)).ravel()
    assert np.allclose(prepare_view_vector(img), want)
    # deterministic: no hidden randomness
    assert np.array_equal(prepare_view_vector(img), prepare_view_vector(img))


# -- persistence -----------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    net = tiny_net(seed=19)
    x = np.random.default_rng(15).normal(size=12)
    path = tmp_path / "model.json"
    save_model(path, net, seed=19, schedule={"stages": [[0.01, 5]]}, metrics={"val_auroc": 0.9})
    loaded, doc = load_model(path)
    assert np.allclose(loaded.forward(x).vector(), net.forward(x).vector())
    assert doc["seed"] == 19
    assert doc["metrics"]["val_auroc"] == 0.9


def test_load_rejects_bad_version(tmp_path):
    net = tiny_net()
    path = tmp_path / "model.json"
    save_model(path, net)
    import json

    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="format version"):
        load_model(path)


def test_load_rejects_corrupt_dimensions(tmp_path):
    net = tiny_net()
    path = tmp_path / "model.json"
    save_model(path, net)
    import json

    doc = json.loads(path.read_text())
    doc["model"]["heads"]["sign"]["w"] = doc["model"]["heads"]["sign"]["w"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="shape mismatch"):
        load_model(path)


def test_from_jsonable_rejects_wrong_kind():
    net = tiny_net()
    d = net.to_jsonable()
    d["kind"] = "something_else"
    with pytest.raises(ValueError, match="per_view_mtl"):
        MultiTaskNet.from_jsonable(d)
