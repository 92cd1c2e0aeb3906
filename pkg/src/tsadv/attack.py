"""Gradient-sign attacks (FGSM, BIM), untargeted and targeted, inside an L-inf ball."""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, LabeledSeries
from .model import MODES, Classifier

METHODS = ("fgsm", "bim")
CHUNK = 256


@dataclass(frozen=True)
class AttackConfig:
    eps_max: float = 0.1
    steps: int = 10
    alpha: float | None = None
    mode: str = "untargeted"
    method: str = "fgsm"

    def __post_init__(self):
        if not self.eps_max >= 0:
            raise ValueError(f"eps_max must be >= 0, got {self.eps_max}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.method == "bim" and self.step_size > self.eps_max:
            warnings.warn(f"BIM step size {self.step_size} exceeds eps_max {self.eps_max}", stacklevel=2)

    @property
    def step_size(self) -> float:
        """BIM step; defaults to half the budget."""
        return self.eps_max / 2 if self.alpha is None else self.alpha


@dataclass(frozen=True)
class AdversarialResult:
    index: int
    original: LabeledSeries
    adversarial: np.ndarray
    pred_before: int
    pred_after: int
    target: int | None
    success: bool
    linf_norm: float


def sign(v: np.ndarray) -> np.ndarray:
    """Componentwise sign with sign(0) = 0."""
    return np.sign(np.asarray(v, dtype=np.float64))


def clip_to_eps_ball(candidate: np.ndarray, origin: np.ndarray, eps: float) -> np.ndarray:
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ValueError(f"shape mismatch {candidate.shape} vs {origin.shape}")
    return np.minimum(origin + eps, np.maximum(candidate, origin - eps))


def fgsm_perturb(classifier: Classifier, X, labels, eps: float, mode: str = "untargeted") -> np.ndarray:
    """One signed-gradient step of size ``eps``.

    ``labels`` are true labels (untargeted) or target labels (targeted). The
    targeted gradient is that of the negated loss, so the same ``+`` step
    descends cross-entropy toward the target.
    """
    X = np.asarray(X, dtype=np.float64)
    if eps == 0:
        return X.copy()
    return X + eps * sign(classifier.grad_input(X, labels, mode))


def bim_perturb(
    classifier: Classifier, X, labels, eps: float, alpha: float, steps: int, mode: str = "untargeted"
) -> np.ndarray:
    """``steps`` signed-gradient steps of size ``alpha``, each clipped back into the eps ball.

    The gradient is recomputed at the current iterate every step.
    """
    X = np.asarray(X, dtype=np.float64)
    X_adv = X.copy()
    if eps == 0:
        return X_adv
    for _ in range(steps):
        step = alpha * sign(classifier.grad_input(X_adv, labels, mode))
        X_adv = clip_to_eps_ball(X_adv + step, X, eps)
    return X_adv


def perturb(classifier: Classifier, X, labels, config: AttackConfig) -> np.ndarray:
    if config.method == "fgsm":
        return fgsm_perturb(classifier, X, labels, config.eps_max, config.mode)
    return bim_perturb(classifier, X, labels, config.eps_max, config.step_size, config.steps, config.mode)


def _check_target(y: int, target: int | None, mode: str) -> None:
    if mode == "targeted":
        if target is None:
            raise ValueError("targeted attack needs a target class")
        if target == y:
            raise ValueError(f"target {target} equals the true label; targeted attack is ill-posed")


def _result(index, x, y, x_adv, pred_before, pred_after, target) -> AdversarialResult:
    success = pred_after == target if target is not None else pred_after != y
    return AdversarialResult(
        index=int(index),
        original=LabeledSeries(x, int(y)),
        adversarial=x_adv,
        pred_before=int(pred_before),
        pred_after=int(pred_after),
        target=None if target is None else int(target),
        success=bool(success),
        linf_norm=float(np.max(np.abs(x_adv - x))) if x.size else 0.0,
    )


def _single(classifier, x, y, config, target):
    _check_target(y, target, config.mode)
    x = np.asarray(x, dtype=np.float64)
    label = target if config.mode == "targeted" else y
    x_adv = perturb(classifier, x[None], [label], config)[0]
    before, after = classifier.predict(np.stack([x, x_adv]))
    return _result(0, x, y, x_adv, before, after, target if config.mode == "targeted" else None)


def fgsm(
    classifier: Classifier, x, y: int, eps: float, mode: str = "untargeted", target: int | None = None
) -> AdversarialResult:
    """FGSM on one series. ``y`` is always the true label."""
    return _single(classifier, x, y, AttackConfig(eps_max=eps, mode=mode, method="fgsm"), target)


def bim(classifier: Classifier, x, y: int, config: AttackConfig, target: int | None = None) -> AdversarialResult:
    if config.method != "bim":
        raise ValueError("bim() needs an AttackConfig with method='bim'")
    return _single(classifier, x, y, config, target)


def attack_pairs(dataset: Dataset, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices and attack labels in result order.

    Untargeted: each sample once with its true label. Targeted: each sample
    against every other class, targets ascending.
    """
    M, K = len(dataset), dataset.num_classes
    if mode == "untargeted":
        return np.arange(M), dataset.y.copy()
    idx = np.repeat(np.arange(M), K - 1)
    targets = np.array([c for y in dataset.y for c in range(K) if c != y], dtype=np.int64)
    return idx, targets


def attack_dataset(
    classifier: Classifier, dataset: Dataset, config: AttackConfig, threads: int = 1
) -> list[AdversarialResult]:
    """Attack every sample (or every sample/target pair) of ``dataset``.

    Work is split into fixed-size chunks, so the output is identical for any
    thread count.
    """
    idx, labels = attack_pairs(dataset, config.mode)
    X = dataset.X[idx]
    chunks = [slice(s, s + CHUNK) for s in range(0, len(idx), CHUNK)]

    def run(sl):
        adv = perturb(classifier, X[sl], labels[sl], config)
        return adv, classifier.predict(X[sl]), classifier.predict(adv)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    if not parts:
        return []
    X_adv = np.concatenate([p[0] for p in parts])
    before = np.concatenate([p[1] for p in parts])
    after = np.concatenate([p[2] for p in parts])
    targeted = config.mode == "targeted"
    return [
        _result(i, X[n], dataset.y[i], X_adv[n], before[n], after[n], labels[n] if targeted else None)
        for n, i in enumerate(idx)
    ]


def success_ratio(results: list[AdversarialResult]) -> float:
    return sum(r.success for r in results) / len(results) if results else 0.0


def adversarial_dataset(results: list[AdversarialResult], source: Dataset) -> Dataset:
    """Adversarial series as a dataset labelled with the original true labels."""
    X = np.stack([r.adversarial for r in results]) if results else np.empty((0, source.series_length))
    y = [r.original.label for r in results]
    return Dataset(f"{source.name}_adv", X, y, source.num_classes, source.split, source.classes)


RESULT_FIELDS = ("index", "pred_before", "pred_after", "target", "success", "linf_norm")


def write_results_csv(results: list[AdversarialResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow(
                [r.index, r.pred_before, r.pred_after, "" if r.target is None else r.target,
                 int(r.success), repr(r.linf_norm)]
            )
