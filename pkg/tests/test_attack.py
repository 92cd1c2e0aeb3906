import math
import warnings

import numpy as np
import pytest

from conftest import random_model
from oracles import fd_grad_input
from tsadv.attack import (
    AttackConfig,
    adversarial_dataset,
    attack_dataset,
    bim,
    bim_perturb,
    clip_to_eps_ball,
    fgsm,
    fgsm_perturb,
    sign,
    success_ratio,
    write_results_csv,
)
from tsadv.data import load_ucr_file, write_ucr_file
from tsadv.evaluation import accuracy
from tsadv.model import ClassifierConfig, init_classifier


def linear_model(T=2, w=(1.0, -1.0), b=(0.0, 0.0)):
    """No conv blocks: logits = mean(x) * w + b."""
    m = init_classifier(ClassifierConfig(len(w), T, ()))
    m.params["dense.weight"][...] = [w]
    m.params["dense.bias"][...] = b
    return m


def zero_model(T=8):
    m = init_classifier(ClassifierConfig(3, T, (2,), (3, 3, 3)))
    for p in m.params.values():
        p[...] = 0.0
    return m


# --- sign / clip --------------------------------------------------------------


def test_sign_examples():
    np.testing.assert_array_equal(sign(np.array([0.3, -0.2, 0.0])), [1.0, -1.0, 0.0])
    np.testing.assert_array_equal(sign(np.zeros(4)), np.zeros(4))


def test_sign_odd(rng):
    v = rng.normal(size=50)
    np.testing.assert_array_equal(sign(-v), -sign(v))


def test_clip_examples():
    o = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(clip_to_eps_ball(o[:1] + 0.3, o[:1], 0.1), o[:1] + 0.1)
    inside = o + np.array([0.05, -0.02, 0.0])
    np.testing.assert_array_equal(clip_to_eps_ball(inside, o, 0.1), inside)
    out = clip_to_eps_ball(o + np.array([0.3, -0.2, 0.05]), o, 0.1) - o
    np.testing.assert_allclose(out, [0.1, -0.1, 0.05], atol=1e-15)


def test_clip_shape_mismatch():
    with pytest.raises(ValueError):
        clip_to_eps_ball(np.zeros(3), np.zeros(2), 0.1)


# --- config -------------------------------------------------------------------


def test_config_defaults():
    c = AttackConfig(method="bim")
    assert (c.eps_max, c.steps, c.step_size, c.mode) == (0.1, 10, 0.05, "untargeted")


def test_bim_alpha_above_eps_warns():
    with pytest.warns(UserWarning):
        AttackConfig(eps_max=0.1, alpha=0.2, method="bim")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        AttackConfig(eps_max=0.1, alpha=0.2, method="fgsm")


@pytest.mark.parametrize("kw", [dict(eps_max=-0.1), dict(steps=0), dict(alpha=0.0), dict(mode="x"), dict(method="pgd")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


# --- fgsm ---------------------------------------------------------------------


def test_fgsm_zero_budget():
    m = random_model(0)
    x = np.random.default_rng(0).normal(size=16)
    r = fgsm(m, x, 1, 0.0)
    np.testing.assert_array_equal(r.adversarial, x)
    assert r.success == (m.predict(x) != 1)
    assert r.linf_norm == 0.0


def test_fgsm_zero_gradient_leaves_input():
    x = np.arange(8.0)
    r = fgsm(zero_model(), x, 0, 0.1)
    np.testing.assert_array_equal(r.adversarial, x)


def test_fgsm_matches_fd_sign_on_linear_model():
    m = linear_model(w=(0.7, -0.4), b=(0.1, 0.0))
    x = np.array([1.0, -1.0])
    numeric, valid = fd_grad_input(m, x, 0)
    assert valid.all()
    r = fgsm(m, x, 0, 0.1)
    np.testing.assert_array_equal(r.adversarial, x + 0.1 * np.sign(numeric))


@pytest.mark.parametrize("seed", range(3))
def test_fgsm_full_budget_when_gradient_nonzero(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed).normal(size=16)
    g = m.grad_input(x, 0)
    r = fgsm(m, x, 0, 0.07)
    d = np.abs(r.adversarial - x)
    np.testing.assert_allclose(d[g != 0], 0.07, rtol=1e-12)
    assert np.all(d[g == 0] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_targeted_step_is_negated_untargeted(seed):
    m = random_model(seed)
    X = np.random.default_rng(seed).normal(size=(6, 16))
    y = np.array([0, 1, 2, 0, 1, 2])
    s = np.sign(m.grad_input(X, y))
    np.testing.assert_array_equal(fgsm_perturb(m, X, y, 0.1, "untargeted"), X + 0.1 * s)
    np.testing.assert_array_equal(fgsm_perturb(m, X, y, 0.1, "targeted"), X + 0.1 * -s)


def test_targeted_fgsm_descends_toward_target():
    m = linear_model(T=4, w=(1.0, 0.0, -1.0), b=(0.0, 0.0, 0.0))
    x = np.full(4, 0.5)
    r = fgsm(m, x, 0, 0.3, mode="targeted", target=2)
    assert m.loss(r.adversarial, 2) < m.loss(x, 2)
    assert r.target == 2


def test_targeted_needs_distinct_target():
    m = random_model(0)
    with pytest.raises(ValueError):
        fgsm(m, np.zeros(16), 1, 0.1, mode="targeted", target=1)
    with pytest.raises(ValueError):
        fgsm(m, np.zeros(16), 1, 0.1, mode="targeted")


def test_fgsm_success_definitions():
    m = linear_model(w=(1.0, -1.0))
    x = np.array([0.05, 0.05])
    r = fgsm(m, x, 0, 0.1)
    assert r.pred_before == 0 and r.pred_after == 1 and r.success
    t = fgsm(m, x, 0, 0.1, mode="targeted", target=1)
    assert t.pred_after == 1 and t.success


# --- bim ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_bim_single_step_equals_fgsm(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed).normal(size=16)
    a = bim(m, x, 2, AttackConfig(eps_max=0.08, steps=1, alpha=0.08, method="bim")).adversarial
    np.testing.assert_array_equal(a, fgsm(m, x, 2, 0.08).adversarial)


def test_bim_zero_eps():
    m = random_model(1)
    x = np.random.default_rng(0).normal(size=16)
    with pytest.warns(UserWarning):
        cfg = AttackConfig(eps_max=0.0, steps=7, alpha=0.01, method="bim")
    np.testing.assert_array_equal(bim(m, x, 0, cfg).adversarial, x)


def test_bim_saturates_on_constant_sign_model():
    # the linear model's input gradient has one sign everywhere in the ball
    m = linear_model(T=5, w=(2.0, -1.0), b=(0.3, 0.0))
    x = np.random.default_rng(3).normal(size=5)
    eps, alpha = 0.1, 0.05
    cur, offsets = x.copy(), []
    for _ in range(10):
        g = m.grad_input(cur, 0)
        cur = np.minimum(x + eps, np.maximum(cur + alpha * np.sign(g), x - eps))
        offsets.append(cur - x)
    np.testing.assert_allclose(np.abs(offsets[1]), eps, rtol=1e-12)
    np.testing.assert_allclose(np.abs(offsets[0]), alpha, rtol=1e-12)
    out = bim(m, x, 0, AttackConfig(eps_max=eps, steps=10, alpha=alpha, method="bim")).adversarial
    np.testing.assert_array_equal(out, x + offsets[-1])


@pytest.mark.parametrize("seed", range(3))
def test_bim_matches_unrolled_loop(seed):
    m = random_model(seed)
    x = np.random.default_rng(seed).normal(size=16)
    cur = x.copy()
    for _ in range(6):
        cur = clip_to_eps_ball(cur - 0.03 * np.sign(m.grad_input(cur, 1)), x, 0.1)
    out = bim_perturb(m, x[None], [1], 0.1, 0.03, 6, mode="targeted")[0]
    np.testing.assert_array_equal(out, cur)


def test_bim_needs_bim_config():
    with pytest.raises(ValueError):
        bim(random_model(0), np.zeros(16), 0, AttackConfig(method="fgsm"))


# --- attack_dataset -------------------------------------------------------------


@pytest.fixture(scope="module")
def ten_samples():
    from tsadv.data import SynthSpec, generate_synthetic

    _, test = generate_synthetic(SynthSpec(series_length=16, samples_per_class=4, seed=2))
    return test.take(range(10))


def test_untargeted_count(ten_samples):
    res = attack_dataset(random_model(0), ten_samples, AttackConfig())
    assert len(res) == 10
    assert [r.index for r in res] == list(range(10))
    assert all(r.target is None for r in res)


def test_targeted_count_and_order(ten_samples):
    res = attack_dataset(random_model(0), ten_samples, AttackConfig(mode="targeted", method="bim"))
    assert len(res) == 20
    for r in res:
        assert r.target != r.original.label
    keys = [(r.index, r.target) for r in res]
    assert keys == sorted(keys)


def test_zero_eps_success_is_clean_error(ten_samples):
    m = random_model(2)
    res = attack_dataset(m, ten_samples, AttackConfig(eps_max=0.0))
    assert success_ratio(res) == pytest.approx(1 - accuracy(m, ten_samples) / 100)


def test_results_match_single_sample_api(ten_samples):
    m = random_model(1)
    cfg = AttackConfig(eps_max=0.1, method="bim", mode="targeted")
    res = attack_dataset(m, ten_samples, cfg)
    for r in res[:6]:
        single = bim(m, r.original.values, r.original.label, cfg, target=r.target)
        np.testing.assert_array_equal(single.adversarial, r.adversarial)
        assert single.success == r.success


def test_thread_count_does_not_change_results(small_task):
    _, test, model = small_task
    big = test.take(np.tile(np.arange(len(test)), 10))
    cfg = AttackConfig(method="bim", steps=3)
    a = attack_dataset(model, big, cfg, threads=1)
    b = attack_dataset(model, big, cfg, threads=4)
    assert np.stack([r.adversarial for r in a]).tobytes() == np.stack([r.adversarial for r in b]).tobytes()
    assert [r.success for r in a] == [r.success for r in b]


def test_ball_containment_and_norm_field(small_task, rng):
    _, test, model = small_task
    for method in ("fgsm", "bim"):
        eps = float(rng.uniform(0, 0.2))
        for r in attack_dataset(model, test, AttackConfig(eps_max=eps, method=method, alpha=eps / 3 or None)):
            assert np.max(np.abs(r.adversarial - r.original.values)) <= eps + 1e-9
            assert r.linf_norm == np.max(np.abs(r.adversarial - r.original.values))


def test_attack_fools_brief_model(small_task):
    _, test, model = small_task
    assert success_ratio(attack_dataset(model, test, AttackConfig())) > 0


def test_export_adversarial_dataset(tmp_path, ten_samples):
    res = attack_dataset(random_model(0), ten_samples, AttackConfig(mode="targeted"))
    adv = adversarial_dataset(res, ten_samples)
    assert len(adv) == 20
    np.testing.assert_array_equal(adv.y, np.repeat(ten_samples.y, 2))
    write_ucr_file(adv, tmp_path / "adv.tsv", delimiter="\t")
    back = load_ucr_file(tmp_path / "adv.tsv", normalize=False)
    np.testing.assert_array_equal(back.X, adv.X)


def test_results_csv(tmp_path, ten_samples):
    res = attack_dataset(random_model(0), ten_samples, AttackConfig())
    write_results_csv(res, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "index,pred_before,pred_after,target,success,linf_norm"
    assert len(lines) == 11
    assert math.isclose(float(lines[1].split(",")[-1]), res[0].linf_norm)
