"""Adversarial training: fine-tune a model on clean batches joined with their adversarial twins."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, perturb
from .data import Dataset
from .model import Classifier, History, TrainSchedule, train_loop


def _defense_schedule() -> TrainSchedule:
    return TrainSchedule(
        max_epochs=1500, batch_size=16, initial_lr=5e-4, min_lr=1e-4, plateau_patience=50, lr_factor=0.5
    )


@dataclass(frozen=True)
class DefenseConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    adv_per_clean: int = 1
    schedule: TrainSchedule = field(default_factory=_defense_schedule)
    precompute: bool = True

    def __post_init__(self):
        if self.adv_per_clean < 1:
            raise ValueError("adv_per_clean must be >= 1")
        if self.attack.mode != "untargeted":
            raise ValueError("adversarial training uses untargeted attacks")


def _variant_configs(cfg: DefenseConfig) -> list[AttackConfig]:
    n = cfg.adv_per_clean
    base = cfg.attack
    out = []
    for k in range(1, n + 1):
        scale = k / n
        alpha = None if base.alpha is None else base.alpha * scale
        out.append(dataclasses.replace(base, eps_max=base.eps_max * scale, alpha=alpha))
    return out


def _adversarial_block(classifier: Classifier, X: np.ndarray, y: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    """``(M * adv_per_clean, T)`` array, sample-major: rows ``i*A .. i*A+A-1`` belong to sample i."""
    variants = [perturb(classifier, X, y, c) for c in _variant_configs(cfg)]
    return np.stack(variants, axis=1).reshape(-1, X.shape[1])


def precompute_adversarials(classifier: Classifier, train: Dataset, cfg: DefenseConfig) -> Dataset:
    """Adversarial counterparts of every training sample, labelled with the true label.

    With ``adv_per_clean = A > 1`` the k-th variant uses budget ``eps*k/A``.
    """
    X_adv = _adversarial_block(classifier, train.X, train.y, cfg)
    y_adv = np.repeat(train.y, cfg.adv_per_clean)
    return Dataset(f"{train.name}_adv", X_adv, y_adv, train.num_classes, train.split, train.classes)


def adversarial_train(
    classifier: Classifier, train: Dataset, adv: Dataset, cfg: DefenseConfig
) -> tuple[Classifier, History]:
    """Fine-tune ``classifier`` (the original model) on clean + adversarial batches.

    Every step sees ``B`` clean samples and their ``B * adv_per_clean``
    adversarial partners, with the loss averaged over all of them. With
    ``cfg.precompute`` false the adversarial set is regenerated from the
    current model at the start of each epoch.
    """
    A = cfg.adv_per_clean
    if len(adv) != A * len(train) or not np.array_equal(adv.y, np.repeat(train.y, A)):
        raise ValueError("adversarial set is not aligned with the training set")

    X, y = train.X, train.y
    adv_X = adv.X
    state = {"adv": adv_X}

    def make_batch(idx, epoch):
        adv_idx = (idx[:, None] * A + np.arange(A)).ravel()
        return (
            np.concatenate([X[idx], state["adv"][adv_idx]]),
            np.concatenate([y[idx], np.repeat(y[idx], A)]),
        )

    hook = None
    if not cfg.precompute:
        def hook(model, epoch):
            if epoch > 0:
                state["adv"] = _adversarial_block(model, X, y, cfg)

    return train_loop(classifier, cfg.schedule, len(train), make_batch, epoch_hook=hook)
