"""Dataset-level (universal) adversarial perturbations under an L-inf budget."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import fgsm_perturb, sign
from .data import Dataset
from .model import Classifier

log = logging.getLogger(__name__)

PERTURBATION_VERSION = 1


@dataclass(frozen=True)
class StepSearchSpec:
    magnitudes: tuple[float, ...]

    def __post_init__(self):
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if m.size == 0 or np.any(m <= 0) or np.any(np.diff(m) <= 0):
            raise ValueError("magnitudes must be positive and strictly ascending")
        object.__setattr__(self, "magnitudes", tuple(float(v) for v in m))

    @classmethod
    def default(cls, eps_max: float, points: int = 25) -> StepSearchSpec:
        """Geometric grid from ``eps_max/64`` to ``4*eps_max``."""
        return cls(tuple(np.geomspace(eps_max / 64, 4 * eps_max, points)))


@dataclass(frozen=True)
class UniversalConfig:
    eps_max: float = 0.1
    r_fooling: float = 0.9
    epoch_fool: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.eps_max > 0:
            raise ValueError("eps_max must be > 0")
        if not 0 < self.r_fooling <= 1:
            raise ValueError("r_fooling must be in (0, 1]")
        if self.epoch_fool < 1:
            raise ValueError("epoch_fool must be >= 1")


@dataclass(frozen=True)
class UniversalPerturbation:
    u: np.ndarray
    eps_max: float
    train_fooling_ratio: float
    epochs_used: int
    seed: int

    def apply(self, dataset: Dataset) -> Dataset:
        if dataset.series_length != self.u.size:
            raise ValueError(f"perturbation length {self.u.size} != series length {dataset.series_length}")
        return dataset.with_values(dataset.X + self.u, name=f"{dataset.name}_uap")


def project_inf_ball(v: np.ndarray, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return np.clip(np.asarray(v, dtype=np.float64), -eps, eps)


def error_ratio(classifier: Classifier, dataset: Dataset, u: np.ndarray | None = None) -> float:
    """Fraction of samples misclassified after adding ``u`` to every series."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    X = dataset.X if u is None else dataset.X + np.asarray(u, dtype=np.float64)
    return float(np.mean(classifier.predict(X) != dataset.y))


def minimal_fooling_step(
    classifier: Classifier, x: np.ndarray, y: int, u: np.ndarray, spec: StepSearchSpec
) -> np.ndarray | None:
    """Smallest grid step ``m * sign(grad)`` that flips the prediction at ``x + u``.

    The gradient of the true-label loss is taken at ``x + u``. All grid
    candidates are scored in one batch; the first that fools wins. Returns
    ``None`` when the gradient is zero or no magnitude fools.
    """
    base = np.asarray(x, dtype=np.float64) + u
    d = sign(classifier.grad_input(base, y))
    if not np.any(d):
        return None
    mags = np.asarray(spec.magnitudes)
    preds = classifier.predict(base + mags[:, None] * d)
    hits = np.flatnonzero(preds != y)
    if hits.size == 0:
        return None
    return mags[hits[0]] * d


def compute_universal(
    classifier: Classifier,
    dataset: Dataset,
    eps_max: float = 0.1,
    r_fooling: float = 0.9,
    epoch_fool: int = 10,
    seed: int = 0,
    spec: StepSearchSpec | None = None,
) -> UniversalPerturbation:
    """Accumulate per-sample minimal fooling steps into one bounded perturbation.

    Samples are skipped when the clean prediction is already wrong, when a
    single FGSM step at ``eps_max`` cannot fool the clean sample (computed
    once up front), or when ``x + U`` already fools. After each accepted step
    ``U`` is clamped back into the ``eps_max`` ball. The sample order is
    reshuffled from ``seed`` before every pass, so different seeds give
    different perturbations.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    UniversalConfig(eps_max, r_fooling, epoch_fool, seed)
    spec = spec or StepSearchSpec.default(eps_max)
    X, y = dataset.X, dataset.y
    clean_ok = classifier.predict(X) == y
    fgsm_fools = classifier.predict(fgsm_perturb(classifier, X, y, eps_max)) != y
    eligible = clean_ok & fgsm_fools

    rng = np.random.default_rng(seed)
    u = np.zeros(dataset.series_length)
    ratio = error_ratio(classifier, dataset, u)
    epochs = 0
    while ratio < r_fooling and epochs < epoch_fool:
        for i in rng.permutation(len(dataset)):
            if not eligible[i] or classifier.predict(X[i] + u) != y[i]:
                continue
            step = minimal_fooling_step(classifier, X[i], int(y[i]), u, spec)
            if step is not None:
                u = project_inf_ball(u + step, eps_max)
        epochs += 1
        ratio = error_ratio(classifier, dataset, u)
        log.debug("universal pass %d: fooling ratio %.3f", epochs, ratio)
    return UniversalPerturbation(u, eps_max, ratio, epochs, seed)


def save_perturbation(pert: UniversalPerturbation, path: str | Path) -> None:
    doc = {
        "format_version": PERTURBATION_VERSION,
        "eps_max": pert.eps_max,
        "seed": pert.seed,
        "T": int(pert.u.size),
        "u": pert.u.tolist(),
        "train_fooling_ratio": pert.train_fooling_ratio,
        "epochs_used": pert.epochs_used,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_perturbation(path: str | Path) -> UniversalPerturbation:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt perturbation file ({exc})") from None
    if doc.get("format_version") != PERTURBATION_VERSION:
        raise ValueError(f"{path}: unsupported format_version {doc.get('format_version')}")
    u = np.array(doc["u"], dtype=np.float64)
    if u.shape != (doc["T"],):
        raise ValueError(f"{path}: u has {u.size} values, header says T={doc['T']}")
    return UniversalPerturbation(u, doc["eps_max"], doc["train_fooling_ratio"], doc["epochs_used"], doc["seed"])
