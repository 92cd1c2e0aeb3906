import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tsadv.data import SynthSpec, generate_synthetic  # noqa: E402
from tsadv.model import ClassifierConfig, TrainSchedule, fit, init_classifier  # noqa: E402

CRITERIA: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, passed: bool, detail: str) -> None:
    CRITERIA[key] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: int(k.split()[0])):
        passed, detail = CRITERIA[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(seed, T=16, K=3, channels=(3, 4), kernels=(4, 3, 2), residual=True, bias_scale=0.1):
    """Small randomly initialized classifier with non-zero biases."""
    cfg = ClassifierConfig(K, T, channels, kernels, residual, init_seed=seed)
    model = init_classifier(cfg)
    r = np.random.default_rng(seed + 10_000)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p[...] = r.normal(scale=bias_scale, size=p.shape)
    return model


@pytest.fixture(scope="session")
def small_task():
    """Short series, few samples, briefly trained: a model that FGSM at 0.1 can fool."""
    train, test = generate_synthetic(SynthSpec(series_length=32, samples_per_class=10, noise_sigma=0.1, seed=42))
    cfg = ClassifierConfig(train.num_classes, train.series_length, (8, 8), (8, 5, 3))
    model, _ = fit(init_classifier(cfg), train, TrainSchedule(max_epochs=20, batch_size=8))
    return train, test, model
