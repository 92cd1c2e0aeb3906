"""Metrics, experiment protocols and report files.

Protocols: a full attack/defense summary row per dataset, accuracy or
targeted-success against a grid of budgets, universal-attack success
against the fraction of training data used, and clean vs adversarially
trained accuracy against the budget.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AdversarialResult, AttackConfig, attack_dataset
from .data import Dataset, subsample
from .defense import DefenseConfig, adversarial_train, precompute_adversarials
from .model import Classifier, ClassifierConfig, TrainSchedule, fit, init_classifier
from .universal import UniversalConfig, compute_universal, error_ratio

log = logging.getLogger(__name__)

DEFAULT_EPS_GRID = (0.0, 0.0125, 0.025, 0.05, 0.075, 0.1, 0.15, 0.2)
METRICS = ("accuracy", "targeted_success")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


class OrderingWarning(UserWarning):
    """BIM came out weaker than FGSM on a row where it usually is not."""


def _pct(**kw):
    return field(metadata={"percent": True}, **kw)


@dataclass
class ReportRow:
    dataset: str
    original_accuracy: float | None = _pct(default=None)
    universal_attack_accuracy: float | None = _pct(default=None)
    fgsm_attack_accuracy: float | None = _pct(default=None)
    bim_attack_accuracy: float | None = _pct(default=None)
    fgsm_targeted_success: float | None = _pct(default=None)
    bim_targeted_success: float | None = _pct(default=None)
    advtrained_fgsm_accuracy: float | None = _pct(default=None)
    advtrained_bim_accuracy: float | None = _pct(default=None)


@dataclass
class SweepPoint:
    eps: float
    fgsm_value: float = _pct()
    bim_value: float = _pct()
    metric: str = "accuracy"


@dataclass
class GeneralizationPoint:
    fraction: float
    success_rate: float = _pct()
    train_fooling_ratio: float = 0.0


@dataclass
class DefensePoint:
    eps: float
    model: str
    method: str
    accuracy: float = _pct()


ROW_TYPES = {cls.__name__: cls for cls in (ReportRow, SweepPoint, GeneralizationPoint, DefensePoint)}


# --- metrics ----------------------------------------------------------------


def accuracy(classifier: Classifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return 100.0 * float(np.mean(classifier.predict(dataset.X) == dataset.y))


def attacked_accuracy(results: list[AdversarialResult]) -> float:
    """Accuracy on the adversarial versions of the samples."""
    if not results:
        raise ValueError("no results")
    return 100.0 * float(np.mean([r.pred_after == r.original.label for r in results]))


def targeted_success_rate(results: list[AdversarialResult], num_classes: int, num_samples: int) -> float:
    """Successful targeted attacks over all ``(K-1)*M`` sample/target pairs."""
    expected = (num_classes - 1) * num_samples
    if len(results) != expected:
        raise ValueError(f"expected {expected} targeted results, got {len(results)}")
    if any(r.target is None for r in results):
        raise ValueError("untargeted result in targeted set")
    return 100.0 * sum(r.success for r in results) / expected


# --- protocols --------------------------------------------------------------


@contextlib.contextmanager
def _stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def table1_row(
    train: Dataset,
    test: Dataset,
    model_cfg: ClassifierConfig | None = None,
    attack_cfg: AttackConfig | None = None,
    defense_cfg: DefenseConfig | None = None,
    universal_cfg: UniversalConfig | None = None,
    schedule: TrainSchedule | None = None,
    classifier: Classifier | None = None,
    threads: int = 1,
) -> ReportRow:
    """Run the whole attack and defense pipeline for one dataset.

    Trains a base model unless ``classifier`` is given. Every reported number
    is measured on ``test``; the universal perturbation and the adversarial
    training set come from ``train``.
    """
    attack_cfg = attack_cfg or AttackConfig()
    defense_cfg = defense_cfg or DefenseConfig(attack=dataclasses.replace(attack_cfg, method="fgsm", mode="untargeted"))
    universal_cfg = universal_cfg or UniversalConfig(eps_max=attack_cfg.eps_max)
    row = ReportRow(dataset=train.name)

    if classifier is None:
        with _stage("train"):
            cfg = model_cfg or ClassifierConfig(train.num_classes, train.series_length)
            classifier, _ = fit(init_classifier(cfg), train, schedule or TrainSchedule())
    with _stage("clean"):
        row.original_accuracy = accuracy(classifier, test)
    with _stage("universal"):
        pert = compute_universal(classifier, train, **dataclasses.asdict(universal_cfg))
        row.universal_attack_accuracy = 100.0 * (1.0 - error_ratio(classifier, test, pert.u))

    def run(method, mode, model=classifier):
        cfg = dataclasses.replace(attack_cfg, method=method, mode=mode)
        return attack_dataset(model, test, cfg, threads=threads)

    with _stage("fgsm"):
        row.fgsm_attack_accuracy = attacked_accuracy(run("fgsm", "untargeted"))
    with _stage("bim"):
        row.bim_attack_accuracy = attacked_accuracy(run("bim", "untargeted"))
    K, M = test.num_classes, len(test)
    with _stage("fgsm_targeted"):
        row.fgsm_targeted_success = targeted_success_rate(run("fgsm", "targeted"), K, M)
    with _stage("bim_targeted"):
        row.bim_targeted_success = targeted_success_rate(run("bim", "targeted"), K, M)
    with _stage("advtrain"):
        adv = precompute_adversarials(classifier, train, defense_cfg)
        defended, _ = adversarial_train(classifier, train, adv, defense_cfg)
    with _stage("advtrained_fgsm"):
        row.advtrained_fgsm_accuracy = attacked_accuracy(run("fgsm", "untargeted", defended))
    with _stage("advtrained_bim"):
        row.advtrained_bim_accuracy = attacked_accuracy(run("bim", "untargeted", defended))
    check_ordering(row)
    return row


def check_ordering(row: ReportRow) -> list[str]:
    """Flag rows where BIM is weaker than FGSM (only meaningful above 50% clean accuracy)."""
    problems = []
    if row.original_accuracy is None or row.original_accuracy <= 50:
        return problems
    if None not in (row.bim_attack_accuracy, row.fgsm_attack_accuracy):
        if row.bim_attack_accuracy > row.fgsm_attack_accuracy:
            problems.append("bim_attack_accuracy > fgsm_attack_accuracy")
    if None not in (row.bim_targeted_success, row.fgsm_targeted_success):
        if row.bim_targeted_success < row.fgsm_targeted_success:
            problems.append("bim_targeted_success < fgsm_targeted_success")
    for p in problems:
        warnings.warn(f"{row.dataset}: {p}", OrderingWarning, stacklevel=2)
    return problems


def _check_grid(grid: Sequence[float]) -> list[float]:
    grid = [float(e) for e in grid]
    if not grid:
        raise ValueError("empty eps grid")
    if any(e < 0 for e in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("eps grid must be non-negative and strictly ascending")
    return grid


def epsilon_sweep(
    classifier: Classifier,
    dataset: Dataset,
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
    metric: str = "accuracy",
    steps: int = 10,
    threads: int = 1,
) -> list[SweepPoint]:
    """FGSM and BIM (step ``eps/2``) at every budget, reusing one model."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    mode = "untargeted" if metric == "accuracy" else "targeted"
    points = []
    for eps in _check_grid(eps_grid):
        values = []
        for method in ("fgsm", "bim"):
            alpha = eps / 2 if eps > 0 else None
            results = attack_dataset(
                classifier, dataset, AttackConfig(eps, steps, alpha, mode, method), threads=threads
            )
            if metric == "accuracy":
                values.append(attacked_accuracy(results))
            else:
                values.append(targeted_success_rate(results, dataset.num_classes, len(dataset)))
        points.append(SweepPoint(eps, values[0], values[1], metric))
    return points


def generalization_curve(
    classifier: Classifier,
    train: Dataset,
    test: Dataset,
    fractions: Sequence[float],
    universal_cfg: UniversalConfig | None = None,
    seed: int = 0,
) -> list[GeneralizationPoint]:
    """Universal-attack test success when ``U`` is built from a fraction of ``train``."""
    universal_cfg = universal_cfg or UniversalConfig()
    fractions = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be ascending")
    out = []
    for frac in fractions:
        part = subsample(train, frac, seed)
        pert = compute_universal(classifier, part, **dataclasses.asdict(universal_cfg))
        out.append(GeneralizationPoint(frac, 100.0 * error_ratio(classifier, test, pert.u), pert.train_fooling_ratio))
    return out


def defense_curve(
    original: Classifier,
    defended: Classifier,
    test: Dataset,
    eps_grid: Sequence[float] = DEFAULT_EPS_GRID,
    steps: int = 10,
    threads: int = 1,
) -> list[DefensePoint]:
    if original.config.parameter_shapes() != defended.config.parameter_shapes():
        raise ValueError("original and defended models have different shapes")
    rows = []
    for eps in _check_grid(eps_grid):
        for name, model in (("original", original), ("defended", defended)):
            for method in ("fgsm", "bim"):
                cfg = AttackConfig(eps, steps, eps / 2 if eps > 0 else None, "untargeted", method)
                acc = attacked_accuracy(attack_dataset(model, test, cfg, threads=threads))
                rows.append(DefensePoint(eps, name, method, acc))
    return rows


# --- report files -----------------------------------------------------------


def _cell(value, percent: bool) -> str:
    if value is None:
        return ""
    if percent:
        return f"{value:.1f}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _table(rows: Sequence) -> tuple[list[str], list[list[str]]]:
    if not rows:
        raise ValueError("nothing to report")
    fields = dataclasses.fields(rows[0])
    header = [f.name for f in fields]
    body = [[_cell(getattr(r, f.name), f.metadata.get("percent", False)) for f in fields] for r in rows]
    return header, body


def render_csv(rows: Sequence) -> str:
    header, body = _table(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


def render_markdown(rows: Sequence) -> str:
    header, body = _table(rows)
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(cells) + " |" for cells in body]
    return "\n".join(lines) + "\n"


def render_json(rows: Sequence) -> str:
    if not rows:
        raise ValueError("nothing to report")
    payload = {"type": type(rows[0]).__name__, "rows": [dataclasses.asdict(r) for r in rows]}
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


RENDERERS = {"csv": render_csv, "json": render_json, "markdown": render_markdown}


def emit_report(rows: Sequence, fmt: str, path: str | Path) -> Path:
    if fmt not in RENDERERS:
        raise ValueError(f"format must be one of {sorted(RENDERERS)}")
    path = Path(path)
    path.write_text(RENDERERS[fmt](list(rows)), encoding="utf-8")
    return path


def _parse(value: str, ftype):
    if value == "":
        return None
    if ftype in (str, "str"):
        return value
    return float(value)


def parse_csv_report(text: str, row_type: type) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    fields = {f.name: f for f in dataclasses.fields(row_type)}
    if header != list(fields):
        raise ValueError(f"CSV header {header} does not match {row_type.__name__}")
    rows = []
    for cells in reader:
        kwargs = {name: _parse(c, fields[name].type) for name, c in zip(header, cells)}
        rows.append(row_type(**kwargs))
    return rows


def read_report(path: str | Path, row_type: type | None = None) -> list:
    """Load rows from a CSV (``row_type`` required) or JSON report."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        doc = json.loads(text)
        cls = ROW_TYPES[doc["type"]]
        return [cls(**r) for r in doc["rows"]]
    if row_type is None:
        raise ValueError("row_type is required for CSV reports")
    return parse_csv_report(text, row_type)

