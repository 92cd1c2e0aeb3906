"""Residual 1D convolutional classifier with hand-written reverse-mode gradients.

Layout: ``num_blocks`` residual blocks, each three same-padded stride-1
convolutions with ReLU, a shortcut added before the block's last ReLU,
then global average pooling over time, a dense layer and softmax. No batch
normalization: every function here is a deterministic map of its inputs,
which keeps input gradients exact.

Activations are channels-last, ``(batch, time, channels)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12
MODES = ("untargeted", "targeted")


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    series_length: int
    channels_per_block: tuple[int, ...] = (16, 32, 32)
    kernel_sizes: tuple[int, int, int] = (8, 5, 3)
    residual: bool = True
    init_seed: int = 0
    num_blocks: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.num_blocks is None:
            object.__setattr__(self, "num_blocks", len(self.channels_per_block))
        if self.num_blocks != len(self.channels_per_block):
            raise ValueError(
                f"num_blocks={self.num_blocks} but {len(self.channels_per_block)} channel counts given"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.series_length < 1:
            raise ValueError("series_length must be >= 1")
        if any(c < 1 for c in self.channels_per_block):
            raise ValueError("channel counts must be positive")
        if len(self.kernel_sizes) != 3 or any(k < 1 for k in self.kernel_sizes):
            raise ValueError("kernel_sizes must be three positive integers")

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = 1
        for b, c_out in enumerate(self.channels_per_block):
            prev = c_in
            for j, k in enumerate(self.kernel_sizes):
                shapes[f"block{b}.conv{j}.weight"] = (c_out, prev, k)
                shapes[f"block{b}.conv{j}.bias"] = (c_out,)
                prev = c_out
            if self.residual and c_in != c_out:
                shapes[f"block{b}.shortcut.weight"] = (c_out, c_in, 1)
                shapes[f"block{b}.shortcut.bias"] = (c_out,)
            c_in = c_out
        shapes["dense.weight"] = (c_in, self.num_classes)
        shapes["dense.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_block"] = list(self.channels_per_block)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ClassifierConfig:
        return cls(**d)


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 200
    batch_size: int = 16
    initial_lr: float = 1e-3
    min_lr: float = 1e-4
    plateau_patience: int = 50
    lr_factor: float = 0.5
    optimizer: str = "adam"
    seed: int = 0
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.min_lr <= self.initial_lr:
            raise ValueError("need 0 < min_lr <= initial_lr")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    final_lr: float | None = None


# --- layer primitives -------------------------------------------------------


def _pad_amounts(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _conv_forward(h, W, b):
    B, T, C = h.shape
    k = W.shape[2]
    hp = np.pad(h, ((0, 0), _pad_amounts(k), (0, 0)))
    cols = sliding_window_view(hp, k, axis=1).reshape(B * T, C * k)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(B, T, -1), cols


def _conv_backward(dout, cols, W, want_params=True):
    B, T, O = dout.shape
    _, C, k = W.shape
    d2 = dout.reshape(B * T, O)
    dW = db = None
    if want_params:
        dW = (d2.T @ cols).reshape(W.shape)
        db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(O, -1)).reshape(B, T, C, k)
    left, _ = _pad_amounts(k)
    dhp = np.zeros((B, T + k - 1, C))
    for j in range(k):
        dhp[:, j : j + T, :] += dcols[:, :, :, j]
    return dhp[:, left : left + T, :], dW, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- classifier -------------------------------------------------------------


class Classifier:
    """A frozen-by-convention set of parameters plus the network math.

    Inputs may be a single series ``(T,)`` or a batch ``(B, T)``; outputs
    follow the same leading shape.
    """

    def __init__(self, config: ClassifierConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    def copy(self) -> Classifier:
        return Classifier(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.config.series_length:
            raise ValueError(
                f"expected series of length {self.config.series_length}, got shape {np.shape(x)}"
            )
        return X, single

    def _labels(self, y, n: int) -> np.ndarray:
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        if np.any(y < 0) or np.any(y >= self.config.num_classes):
            raise ValueError(f"class index out of range [0, {self.config.num_classes - 1}]")
        return y

    def _forward(self, X: np.ndarray):
        p = self.params
        cfg = self.config
        h = X[:, :, None]
        tape = []
        for b in range(cfg.num_blocks):
            block_in = h
            a = h
            layers = []
            for j in range(3):
                z, cols = _conv_forward(a, p[f"block{b}.conv{j}.weight"], p[f"block{b}.conv{j}.bias"])
                layers.append((cols, z))
                if j < 2:
                    a = np.maximum(z, 0.0)
            short = None
            if cfg.residual:
                key = f"block{b}.shortcut.weight"
                if key in p:
                    s, short = _conv_forward(block_in, p[key], p[f"block{b}.shortcut.bias"])
                else:
                    s = block_in
                z = z + s
            h = np.maximum(z, 0.0)
            tape.append((layers, short, z))
        pooled = h.mean(axis=1)
        logits = pooled @ p["dense.weight"] + p["dense.bias"]
        return _softmax(logits), (tape, pooled, h.shape)

    def _backward(self, dlogits, cache, want_params=True):
        p = self.params
        cfg = self.config
        tape, pooled, h_shape = cache
        grads: dict[str, np.ndarray] = {}
        if want_params:
            grads["dense.weight"] = pooled.T @ dlogits
            grads["dense.bias"] = dlogits.sum(axis=0)
        dpooled = dlogits @ p["dense.weight"].T
        B, T, C = h_shape
        dh = np.broadcast_to(dpooled[:, None, :] / T, (B, T, C))
        for b in reversed(range(cfg.num_blocks)):
            layers, short, z_out = tape[b]
            dz = dh * (z_out > 0)
            dblock_in = None
            if cfg.residual:
                key = f"block{b}.shortcut.weight"
                if key in p:
                    dblock_in, dW, db = _conv_backward(dz, short, p[key], want_params)
                    if want_params:
                        grads[key] = dW
                        grads[f"block{b}.shortcut.bias"] = db
                else:
                    dblock_in = dz
            da = dz
            for j in reversed(range(3)):
                cols, z = layers[j]
                if j < 2:
                    da = da * (z > 0)
                da, dW, db = _conv_backward(da, cols, p[f"block{b}.conv{j}.weight"], want_params)
                if want_params:
                    grads[f"block{b}.conv{j}.weight"] = dW
                    grads[f"block{b}.conv{j}.bias"] = db
            dh = da if dblock_in is None else da + dblock_in
        return np.asarray(dh)[:, :, 0], grads

    def _dlogits(self, probs, y):
        """Per-sample gradient of the clamped cross-entropy w.r.t. the logits."""
        d = probs.copy()
        rows = np.arange(len(y))
        d[rows, y] -= 1.0
        d[probs[rows, y] < PROB_FLOOR] = 0.0
        return d

    def forward(self, x) -> np.ndarray:
        X, single = self._batch(x)
        probs, _ = self._forward(X)
        return probs[0] if single else probs

    def predict(self, x) -> np.ndarray | int:
        probs = self.forward(x)
        pred = probs.argmax(axis=-1)
        return int(pred) if np.ndim(pred) == 0 else pred

    def activation_pattern(self, x) -> np.ndarray:
        """Concatenated on/off state of every ReLU, one row per sample.

        Two inputs with equal patterns lie in the same linear region of the
        network, which is what finite-difference checks need to know.
        """
        X, single = self._batch(x)
        _, (tape, _, _) = self._forward(X)
        parts = []
        for layers, _, z_out in tape:
            parts.extend((z > 0).reshape(len(X), -1) for _, z in layers[:2])
            parts.append((z_out > 0).reshape(len(X), -1))
        pattern = np.concatenate(parts, axis=1) if parts else np.zeros((len(X), 0), dtype=bool)
        return pattern[0] if single else pattern

    def loss(self, x, y):
        """Cross-entropy ``-log p_y`` with ``p_y`` clamped below at 1e-12."""
        X, single = self._batch(x)
        y = self._labels(y, len(X))
        probs, _ = self._forward(X)
        losses = -np.log(np.maximum(probs[np.arange(len(X)), y], PROB_FLOOR))
        return float(losses[0]) if single else losses

    def targeted_loss(self, x, target):
        out = self.loss(x, target)
        return -out

    def grad_input(self, x, y, mode: str = "untargeted") -> np.ndarray:
        """Gradient of each sample's own loss with respect to its input.

        ``mode='targeted'`` differentiates ``targeted_loss`` instead, so the
        result is exactly the negation of the untargeted gradient at the
        same label.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        X, single = self._batch(x)
        y = self._labels(y, len(X))
        probs, cache = self._forward(X)
        dx, _ = self._backward(self._dlogits(probs, y), cache, want_params=False)
        if mode == "targeted":
            dx = -dx
        return dx[0] if single else dx

    def loss_and_grad(self, X, y) -> tuple[float, dict[str, np.ndarray]]:
        X, _ = self._batch(X)
        if len(X) == 0:
            raise ValueError("empty batch")
        y = self._labels(y, len(X))
        probs, cache = self._forward(X)
        loss = float(np.mean(-np.log(np.maximum(probs[np.arange(len(X)), y], PROB_FLOOR))))
        _, grads = self._backward(self._dlogits(probs, y) / len(X), cache)
        return loss, {k: grads[k] for k in self.params}

    def grad_params(self, X, y) -> dict[str, np.ndarray]:
        """Mean cross-entropy gradient over the batch, keyed like ``params``."""
        return self.loss_and_grad(X, y)[1]


def init_classifier(config: ClassifierConfig) -> Classifier:
    """He (fan-in) normal weights, zero biases, drawn in parameter order."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if name == "dense.weight" else shape[1] * shape[2]
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return Classifier(config, params)


# --- training ---------------------------------------------------------------


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[k] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def step(self, params, grads, lr):
        for k, g in grads.items():
            params[k] -= lr * g


BatchFn = Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]


def train_loop(
    classifier: Classifier,
    schedule: TrainSchedule,
    num_items: int,
    make_batch: BatchFn,
    epoch_hook: Callable[[Classifier, int], None] | None = None,
) -> tuple[Classifier, History]:
    """Shared mini-batch optimizer loop with plateau learning-rate decay.

    ``make_batch(indices, epoch)`` turns a slice of the shuffled item order into
    the ``(X, y)`` arrays for one step; ``epoch_hook(model, epoch)`` runs before
    each epoch. The returned classifier is a copy.
    """
    model = classifier.copy()
    history = History()
    if num_items == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = Adam() if schedule.optimizer == "adam" else SGD()
    rng = np.random.default_rng(schedule.seed)
    lr = schedule.initial_lr
    best = math.inf
    wait = 0
    for epoch in range(schedule.max_epochs):
        if epoch_hook is not None:
            epoch_hook(model, epoch)
        order = rng.permutation(num_items)
        total, count = 0.0, 0
        for start in range(0, num_items, schedule.batch_size):
            X, y = make_batch(order[start : start + schedule.batch_size], epoch)
            loss, grads = model.loss_and_grad(X, y)
            opt.step(model.params, grads, lr)
            total += loss * len(y)
            count += len(y)
        epoch_loss = total / count
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        history.loss.append(epoch_loss)
        history.lr.append(lr)
        if epoch_loss < best - schedule.plateau_tol:
            best = epoch_loss
            wait = 0
        else:
            wait += 1
            if wait >= schedule.plateau_patience:
                new_lr = max(lr * schedule.lr_factor, schedule.min_lr)
                if new_lr < lr:
                    log.info("epoch %d: lr %.3g -> %.3g", epoch, lr, new_lr)
                lr = new_lr
                wait = 0
    history.final_lr = lr
    return model, history


def fit(classifier: Classifier, train: Dataset, schedule: TrainSchedule) -> tuple[Classifier, History]:
    X, y = train.X, train.y
    return train_loop(classifier, schedule, len(train), lambda idx, _epoch: (X[idx], y[idx]))


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(classifier: Classifier, path: str | Path) -> None:
    """Write a self-describing JSON checkpoint.

    Floats are emitted via ``repr``, the shortest decimal that parses back to
    the same double, so the round trip is bit-exact.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": classifier.config.to_dict(),
        "parameters": {k: v.tolist() for k, v in classifier.params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Classifier:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or not {"format_version", "config", "parameters"} <= doc.keys():
        raise CheckpointError(f"{path}: corrupt checkpoint (missing fields)")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {doc['format_version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    try:
        config = ClassifierConfig.from_dict(doc["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config ({exc})") from None
    expected = config.parameter_shapes()
    stored = doc["parameters"]
    missing = expected.keys() - stored.keys()
    extra = stored.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {sorted(missing)}, extra {sorted(extra)})")
    params = {}
    for name, shape in expected.items():
        try:
            arr = np.array(stored[name], dtype=np.float64)
        except (TypeError, ValueError):
            raise CheckpointError(f"{path}: tensor {name} is malformed") from None
        if arr.shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: tensor {name} has non-finite values")
        params[name] = arr
    return Classifier(config, params)

