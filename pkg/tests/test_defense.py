import hashlib

import numpy as np
import pytest

from tsadv.attack import AttackConfig, attack_dataset, fgsm_perturb
from tsadv.evaluation import accuracy, attacked_accuracy
from tsadv.model import Classifier, TrainSchedule, fit
from tsadv.defense import DefenseConfig, adversarial_train, precompute_adversarials


def short(epochs=3, **kw):
    return TrainSchedule(max_epochs=epochs, batch_size=8, initial_lr=5e-4, min_lr=1e-4, **kw)


def digest(ds):
    return hashlib.sha256(ds.X.tobytes() + ds.y.tobytes()).hexdigest()


def test_default_config():
    cfg = DefenseConfig()
    s = cfg.schedule
    assert (cfg.attack.method, cfg.attack.mode, cfg.attack.eps_max) == ("fgsm", "untargeted", 0.1)
    assert (s.max_epochs, s.initial_lr, s.min_lr, s.plateau_patience, s.lr_factor) == (1500, 5e-4, 1e-4, 50, 0.5)
    assert cfg.adv_per_clean == 1 and cfg.precompute


@pytest.mark.parametrize("kw", [dict(adv_per_clean=0), dict(attack=AttackConfig(mode="targeted"))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DefenseConfig(**kw)


def test_precompute_counts_and_ball(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig())
    assert len(adv) == len(train)
    np.testing.assert_array_equal(adv.y, train.y)
    assert np.max(np.abs(adv.X - train.X)) <= 0.1 + 1e-9
    np.testing.assert_array_equal(adv.X, fgsm_perturb(model, train.X, train.y, 0.1))


def test_precompute_zero_eps_is_clean(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig(attack=AttackConfig(eps_max=0.0)))
    np.testing.assert_array_equal(adv.X, train.X)


def test_two_variants_use_scaled_eps(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig(adv_per_clean=2))
    assert len(adv) == 2 * len(train)
    np.testing.assert_array_equal(adv.X[0::2], fgsm_perturb(model, train.X, train.y, 0.05))
    np.testing.assert_array_equal(adv.X[1::2], fgsm_perturb(model, train.X, train.y, 0.1))
    np.testing.assert_array_equal(adv.y, np.repeat(train.y, 2))


def test_bim_variants_scale_step(small_task):
    train, _, model = small_task
    cfg = DefenseConfig(attack=AttackConfig(method="bim", steps=2, alpha=0.06), adv_per_clean=2)
    adv = precompute_adversarials(model, train, cfg)
    assert np.max(np.abs(adv.X[0::2] - train.X)) <= 0.05 + 1e-9


def test_zero_epochs_returns_original(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig())
    out, hist = adversarial_train(model, train, adv, DefenseConfig(schedule=short(0)))
    assert hist.loss == []
    for k in model.params:
        assert out.params[k].tobytes() == model.params[k].tobytes()


def test_misaligned_adversarials(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig())
    with pytest.raises(ValueError):
        adversarial_train(model, train, adv.take(range(len(adv) - 1)), DefenseConfig(schedule=short(1)))
    shuffled = adv.take(np.roll(np.arange(len(adv)), 1))
    with pytest.raises(ValueError):
        adversarial_train(model, train, shuffled, DefenseConfig(schedule=short(1)))


@pytest.mark.parametrize("A", [1, 3])
def test_batch_composition(small_task, monkeypatch, A):
    train, _, model = small_task
    cfg = DefenseConfig(adv_per_clean=A, schedule=short(1))
    adv = precompute_adversarials(model, train, cfg)
    seen = []
    real = Classifier.loss_and_grad

    def spy(self, X, y):
        seen.append((np.array(X), np.array(y)))
        return real(self, X, y)

    monkeypatch.setattr(Classifier, "loss_and_grad", spy)
    adversarial_train(model, train, adv, cfg)
    rows = {r.tobytes(): i for i, r in enumerate(train.X)}
    assert sum(len(y) for _, y in seen) == (1 + A) * len(train)
    for X, y in seen:
        B = len(y) // (1 + A)
        assert len(y) == B * (1 + A)
        clean_idx = [rows[r.tobytes()] for r in X[:B]]
        expected_adv = adv.X[(np.array(clean_idx)[:, None] * A + np.arange(A)).ravel()]
        np.testing.assert_array_equal(X[B:], expected_adv)
        np.testing.assert_array_equal(y[B:], np.repeat(y[:B], A))


def test_precomputed_set_untouched_and_model_changes(small_task):
    train, _, model = small_task
    cfg = DefenseConfig(schedule=short(3))
    adv = precompute_adversarials(model, train, cfg)
    before = digest(adv)
    out, hist = adversarial_train(model, train, adv, cfg)
    assert digest(adv) == before
    assert len(hist.loss) == 3
    assert any(not np.array_equal(out.params[k], model.params[k]) for k in model.params)


def test_regenerate_mode_differs(small_task):
    train, _, model = small_task
    adv = precompute_adversarials(model, train, DefenseConfig())
    a, _ = adversarial_train(model, train, adv, DefenseConfig(schedule=short(3)))
    b, _ = adversarial_train(model, train, adv, DefenseConfig(schedule=short(3), precompute=False))
    assert not np.array_equal(a.params["dense.weight"], b.params["dense.weight"])


def test_lr_nonincreasing_and_floored(small_task):
    train, _, model = small_task
    cfg = DefenseConfig(schedule=short(12, plateau_patience=1))
    adv = precompute_adversarials(model, train, cfg)
    _, hist = adversarial_train(model, train, adv, cfg)
    assert all(a >= b for a, b in zip(hist.lr, hist.lr[1:]))
    assert min(hist.lr) >= 1e-4


def test_zero_eps_matches_fine_tuning(small_task):
    train, test, model = small_task
    cfg = DefenseConfig(attack=AttackConfig(eps_max=0.0), schedule=short(10))
    adv = precompute_adversarials(model, train, cfg)
    defended, _ = adversarial_train(model, train, adv, cfg)
    tuned, _ = fit(model, train, cfg.schedule)
    assert abs(accuracy(defended, test) - accuracy(tuned, test)) <= 10.0


def test_defense_improves_fgsm_accuracy(small_task):
    train, test, model = small_task
    cfg = DefenseConfig(schedule=short(60))
    adv = precompute_adversarials(model, train, cfg)
    defended, _ = adversarial_train(model, train, adv, cfg)
    attack = AttackConfig()
    before = attacked_accuracy(attack_dataset(model, test, attack))
    after = attacked_accuracy(attack_dataset(defended, test, attack))
    assert after > before
