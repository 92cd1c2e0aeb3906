"""Univariate time-series datasets: UCR text files, synthetic waveforms, subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHAPES = ("sine", "square", "sawtooth")
CYCLES = 3
STD_FLOOR = 1e-8


class DatasetFormatError(ValueError):
    """Raised when a UCR-style file cannot be parsed into a dataset."""


@dataclass(frozen=True)
class LabeledSeries:
    values: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of equal-length univariate series.

    ``X`` has shape ``(M, T)`` and ``y`` holds class indices in ``[0, K)``.
    ``classes`` keeps the raw label values in index order so a dataset can be
    written back in its original labelling.
    """

    name: str
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    classes: tuple[float, ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D (M, T), got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        if not np.all(np.isfinite(X)):
            raise ValueError("series values must be finite")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.classes:
            object.__setattr__(self, "classes", tuple(float(c) for c in range(self.num_classes)))
        elif len(self.classes) != self.num_classes:
            raise ValueError("classes must list one raw label per class")

    @property
    def series_length(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> LabeledSeries:
        return LabeledSeries(self.X[i], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledSeries]:
        for i in range(len(self)):
            yield self[i]

    def take(self, indices: Sequence[int]) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.name, self.X[idx], self.y[idx], self.num_classes, self.split, self.classes)

    def with_values(self, X: np.ndarray, name: str | None = None) -> Dataset:
        """Same labels, new series values (e.g. an adversarial copy)."""
        return Dataset(name or self.name, X, self.y, self.num_classes, self.split, self.classes)


@dataclass(frozen=True)
class SynthSpec:
    series_length: int = 64
    samples_per_class: int = 100
    noise_sigma: float = 0.1
    seed: int = 42

    def __post_init__(self):
        if self.series_length < 8:
            raise ValueError(f"series_length must be >= 8, got {self.series_length}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def znormalize(series: np.ndarray) -> np.ndarray:
    """Zero mean, unit population standard deviation.

    Near-constant series (std below 1e-8) map to all zeros.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty series")
    std = x.std()
    if std < STD_FLOOR:
        return np.zeros_like(x)
    return (x - x.mean()) / std


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def load_ucr_file(
    path: str | Path,
    delimiter: str = "auto",
    normalize: bool = True,
    classes: Sequence[float] | None = None,
    split: str = "train",
    name: str | None = None,
) -> Dataset:
    """Read a UCR-format text file (``label<delim>v1<delim>...<delim>vT`` per line).

    Raw labels are remapped to ``0..K-1`` in ascending order of their value.
    Pass ``classes`` (typically ``train.classes``) to share one mapping between
    a train and a test file.
    """
    path = Path(path)
    if delimiter not in ("auto", "comma", "tab", ",", "\t"):
        raise ValueError(f"unknown delimiter {delimiter!r}")
    sep = {"comma": ",", "tab": "\t"}.get(delimiter, delimiter)

    raw_labels: list[float] = []
    rows: list[list[float]] = []
    length = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if sep == "auto":
                sep = _detect_delimiter(line)
            tokens = [tok.strip() for tok in line.split(sep)]
            try:
                nums = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric token ({exc})") from None
            if len(nums) < 2:
                raise DatasetFormatError(f"{path}:{lineno}: expected a label and at least one value")
            if length is None:
                length = len(nums) - 1
            elif len(nums) - 1 != length:
                raise DatasetFormatError(
                    f"{path}:{lineno}: ragged row with {len(nums) - 1} values, expected {length}"
                )
            raw_labels.append(nums[0])
            rows.append(nums[1:])

    if not rows:
        raise DatasetFormatError(f"{path}: no samples")
    X = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DatasetFormatError(f"{path}: non-finite values")

    if classes is None:
        classes = sorted(set(raw_labels))
        if len(classes) < 2:
            raise DatasetFormatError(f"{path}: found {len(classes)} distinct label(s), need at least 2")
    lookup = {float(c): i for i, c in enumerate(classes)}
    try:
        y = np.array([lookup[lab] for lab in raw_labels], dtype=np.int64)
    except KeyError as exc:
        raise DatasetFormatError(f"{path}: label {exc.args[0]} not among known classes") from None

    if normalize:
        X = np.apply_along_axis(znormalize, 1, X)
    return Dataset(name or path.stem, X, y, len(classes), split, tuple(float(c) for c in classes))


def _format_label(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def write_ucr_file(dataset: Dataset, path: str | Path, delimiter: str = ",") -> None:
    """Write ``dataset`` in UCR text format using its raw labels.

    Values are written with ``repr`` so reloading (with ``normalize=False``)
    is bit-exact.
    """
    sep = {"comma": ",", "tab": "\t"}.get(delimiter, delimiter)
    lines = []
    for values, label in zip(dataset.X, dataset.y):
        fields = [_format_label(dataset.classes[label])]
        fields.extend(repr(float(v)) for v in values)
        lines.append(sep.join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_series(shape: str, length: int, phase: float) -> np.ndarray:
    """Noise-free waveform with ``CYCLES`` periods over ``length`` points."""
    theta = 2 * np.pi * CYCLES * np.arange(length) / length + phase
    if shape == "sine":
        return np.sin(theta)
    if shape == "square":
        return np.where(np.sin(theta) >= 0, 1.0, -1.0)
    if shape == "sawtooth":
        return 2.0 * np.mod(theta / (2 * np.pi), 1.0) - 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _synth_split(spec: SynthSpec, rng: np.random.Generator, split: str) -> Dataset:
    labels = np.repeat(np.arange(len(SHAPES)), spec.samples_per_class)
    labels = labels[rng.permutation(labels.size)]
    phases = rng.uniform(0.0, 2 * np.pi, size=labels.size)
    noise = rng.standard_normal((labels.size, spec.series_length)) * spec.noise_sigma
    X = np.empty((labels.size, spec.series_length))
    for i, (lab, phi) in enumerate(zip(labels, phases)):
        X[i] = znormalize(render_series(SHAPES[lab], spec.series_length, phi) + noise[i])
    return Dataset(f"synthetic_{split}", X, labels, len(SHAPES), split)


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Three-class sine/square/sawtooth task with random phase and Gaussian noise.

    Train and test come from independent child streams of ``spec.seed``.
    """
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    train = _synth_split(spec, np.random.default_rng(train_seq), "train")
    test = _synth_split(spec, np.random.default_rng(test_seq), "test")
    return train, test


def subsample(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Draw ``ceil(fraction * M)`` samples without replacement, stratified by class.

    Each class gets ``floor(fraction * m_c)`` samples; leftover slots go to the
    classes with the largest fractional remainders. Selected samples keep
    their original relative order.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    M = len(dataset)
    n = math.ceil(fraction * M)
    if n == 0:
        raise ValueError("subsample would be empty")
    if n >= M:
        return dataset

    counts = np.bincount(dataset.y, minlength=dataset.num_classes)
    quota = np.floor(fraction * counts).astype(np.int64)
    remainder = fraction * counts - quota
    for c in sorted(range(len(counts)), key=lambda c: (-remainder[c], c)):
        if quota.sum() >= n:
            break
        if quota[c] < counts[c]:
            quota[c] += 1
    # rounding can leave a shortfall when classes saturate
    while quota.sum() < n:
        c = int(np.argmax(counts - quota))
        quota[c] += 1

    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.y == c)
        if quota[c]:
            chosen.append(rng.choice(members, size=quota[c], replace=False))
    idx = np.sort(np.concatenate(chosen))
    return dataset.take(idx)
