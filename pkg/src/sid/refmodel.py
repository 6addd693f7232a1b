"""Handcrafted-feature softmax classifier used as the built-in detector.

Features are texture and compression statistics of a patch; the classifier
is multinomial logistic regression trained with plain mini-batch gradient
descent and patience-based early stopping.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .alterations import AugmentationPolicy, augment
from .errors import DegenerateClassError, ParameterError, VersionError
from .imageops import GLCM_LEVELS, GLCM_OFFSETS, Patch, compute_glcm, to_grayscale

log = logging.getLogger(__name__)

MODEL_VERSION = 1
FEATURE_DIM = 20
AUTHENTIC = "authentic"

FEATURE_NAMES = tuple(
    f"{stat}_{dx}_{dy}"
    for dx, dy in GLCM_OFFSETS
    for stat in ("contrast", "homogeneity", "energy", "correlation")
) + ("laplacian_var", "blockiness", "luma_mean", "luma_std")


# --------------------------------------------------------------------------
# features

def _glcm_stats(cells: np.ndarray) -> list[float]:
    levels = cells.shape[0]
    i, j = np.indices((levels, levels), dtype=np.float64)
    contrast = float((cells * (i - j) ** 2).sum())
    homogeneity = float((cells / (1.0 + (i - j) ** 2)).sum())
    energy = float((cells ** 2).sum())
    mu_i = (cells * i).sum()
    mu_j = (cells * j).sum()
    sd_i = np.sqrt((cells * (i - mu_i) ** 2).sum())
    sd_j = np.sqrt((cells * (j - mu_j) ** 2).sum())
    if sd_i < 1e-12 or sd_j < 1e-12:
        correlation = 1.0
    else:
        correlation = float((cells * (i - mu_i) * (j - mu_j)).sum() / (sd_i * sd_j))
    return [contrast, homogeneity, energy, correlation]


def _blockiness(g: np.ndarray) -> float:
    col_steps = np.abs(np.diff(g, axis=1))
    row_steps = np.abs(np.diff(g, axis=0))
    # step j sits between pixel j and j + 1
    col_edge = (np.arange(col_steps.shape[1]) + 1) % 8 == 0
    row_edge = (np.arange(row_steps.shape[0]) + 1) % 8 == 0
    on = np.concatenate([col_steps[:, col_edge].ravel(), row_steps[row_edge].ravel()])
    off = np.concatenate([col_steps[:, ~col_edge].ravel(), row_steps[~row_edge].ravel()])
    if on.size == 0 or off.size == 0:
        return 0.0
    return float(on.mean() - off.mean())


def extract_features(patch: Union[Patch, np.ndarray]) -> np.ndarray:
    pixels = patch.pixels if isinstance(patch, Patch) else patch
    if min(pixels.shape[:2]) < 8:
        raise ParameterError(f"patch side must be >= 8, got {pixels.shape[:2]}")
    gray = to_grayscale(pixels) if pixels.ndim == 3 else pixels
    feats: list[float] = []
    for offset in GLCM_OFFSETS:
        glcm = compute_glcm(gray, GLCM_LEVELS, [offset], symmetric=True)
        feats.extend(_glcm_stats(glcm.cells))
    g = gray.astype(np.float64)
    lap = g[1:-1, :-2] + g[1:-1, 2:] + g[:-2, 1:-1] + g[2:, 1:-1] - 4.0 * g[1:-1, 1:-1]
    feats.append(float(lap.var()))
    feats.append(_blockiness(g))
    feats.append(float(g.mean()))
    feats.append(float(g.std()))
    return np.asarray(feats, dtype=np.float64)


def extract_many(patches: Sequence[Union[Patch, np.ndarray]]) -> np.ndarray:
    if not patches:
        return np.zeros((0, FEATURE_DIM))
    return np.stack([extract_features(p) for p in patches])


class AugmentedFeatureSource:
    """Re-augments training patches every epoch before extracting features.

    Patch ``i`` in epoch ``e`` (1-based) is augmented with image index
    ``(e - 1) * len(patches) + i``.
    """

    def __init__(self, patches: Sequence[Union[Patch, np.ndarray]], labels: Sequence[str],
                 policy: AugmentationPolicy):
        self.pixels = [p.pixels if isinstance(p, Patch) else p for p in patches]
        self.labels = list(labels)
        self.policy = policy

    def __call__(self, epoch: int) -> tuple[np.ndarray, list[str]]:
        n = len(self.pixels)
        feats = [extract_features(augment(px, self.policy, (epoch - 1) * n + i)[0])
                 for i, px in enumerate(self.pixels)]
        return np.stack(feats), self.labels


# --------------------------------------------------------------------------
# model

@dataclass
class RefModel:
    weights: np.ndarray
    bias: np.ndarray
    label_space: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if len(self.label_space) < 2:
            raise ParameterError("a model needs at least two classes")
        if np.any(self.scale <= 0):
            raise ParameterError("normalization scales must be positive")

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[1])

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "label_space": list(self.label_space),
            "D": self.n_features,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "normalization": {"mean": self.mean.tolist(), "scale": self.scale.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RefModel":
        if "version" not in data:
            raise KeyError("version")
        if data["version"] != MODEL_VERSION:
            raise VersionError(f"unsupported reference model version {data['version']!r}")
        weights = np.asarray(data["weights"], dtype=np.float64)
        if weights.shape != (len(data["label_space"]), data["D"]):
            raise ParameterError(f"weights shape {weights.shape} does not match header")
        return cls(weights, np.asarray(data["bias"], dtype=np.float64),
                   tuple(data["label_space"]),
                   np.asarray(data["normalization"]["mean"], dtype=np.float64),
                   np.asarray(data["normalization"]["scale"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RefModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def zero_model(label_space: Sequence[str], n_features: int = FEATURE_DIM) -> RefModel:
    c = len(label_space)
    return RefModel(np.zeros((c, n_features)), np.zeros(c), tuple(label_space),
                    np.zeros(n_features), np.ones(n_features))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: RefModel, features: np.ndarray) -> np.ndarray:
    """Class probabilities aligned with ``model.label_space``.

    Accepts one feature vector or a stack of them.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != model.n_features:
        raise ParameterError(
            f"feature length {features.shape[-1]} != model dimension {model.n_features}")
    return softmax(model.normalize(features) @ model.weights.T + model.bias)


def _loss_grad(weights: np.ndarray, bias: np.ndarray, xn: np.ndarray,
               y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    logits = xn @ weights.T + bias
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = xn.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ xn, delta.sum(axis=0)


def label_indices(labels: Sequence[str], label_space: Sequence[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(label_space)}
    try:
        return np.asarray([index[lab] for lab in labels], dtype=np.intp)
    except KeyError as exc:
        raise ParameterError(f"label {exc.args[0]!r} not in label space {list(label_space)}") from None


def loss_and_gradient(model: RefModel, features: np.ndarray,
                      labels: Sequence[str]) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient, flattened as ``[weights, bias]``."""
    y = label_indices(labels, model.label_space)
    loss, gw, gb = _loss_grad(model.weights, model.bias, model.normalize(features), y)
    return loss, np.concatenate([gw.ravel(), gb])


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 2
    monitor: str = "validation_accuracy"
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ParameterError("patience must be >= 0")
        if self.monitor not in ("validation_accuracy", "validation_loss"):
            raise ParameterError(f"unknown monitor {self.monitor!r}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ParameterError("batch_size and learning_rate must be positive")


class EarlyStopping:
    """Strict-improvement early stopping; equal values count as no improvement."""

    def __init__(self, patience: int, mode: str = "max"):
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record ``value``; return True when it is a new best."""
        better = (self.best is None
                  or (value > self.best if self.mode == "max" else value < self.best))
        if better:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs > 0 and self.bad_epochs >= self.patience


@dataclass
class TrainReport:
    monitor: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"monitor": self.monitor, "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early, "epochs": self.epochs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _evaluate(model: RefModel, features: np.ndarray, y: np.ndarray) -> dict[str, float]:
    loss, _, _ = _loss_grad(model.weights, model.bias, model.normalize(features), y)
    probs = predict(model, features)
    accuracy = float((probs.argmax(axis=1) == y).mean())
    return {"validation_loss": loss, "validation_accuracy": accuracy}


def default_label_space(labels: Sequence[str]) -> tuple[str, ...]:
    """Sorted class names with ``authentic`` first when present."""
    names = sorted(set(labels))
    if AUTHENTIC in names:
        names.remove(AUTHENTIC)
        names.insert(0, AUTHENTIC)
    return tuple(names)


FeatureSet = tuple[np.ndarray, Sequence[str]]


def train(train_set: Union[FeatureSet, Callable[[int], FeatureSet]], val_set: FeatureSet,
          cfg: TrainConfig = TrainConfig(),
          label_space: Sequence[str] | None = None) -> tuple[RefModel, TrainReport]:
    """Fit a softmax classifier, keeping the best-epoch weights.

    ``train_set`` is either ``(features, labels)`` or a callable returning
    that pair for a 1-based epoch number (used for per-epoch augmentation).
    Normalization statistics come from the first epoch's training features.
    """
    source = train_set if callable(train_set) else (lambda epoch: train_set)
    x_train, train_labels = source(1)
    x_train = np.asarray(x_train, dtype=np.float64)
    if label_space is None:
        label_space = default_label_space(train_labels)
    label_space = tuple(label_space)
    y_train = label_indices(train_labels, label_space)
    present = np.bincount(y_train, minlength=len(label_space))
    empty = [label_space[i] for i in np.flatnonzero(present == 0)]
    if empty:
        raise DegenerateClassError(f"no training samples for classes {empty}")
    x_val = np.asarray(val_set[0], dtype=np.float64)
    y_val = label_indices(val_set[1], label_space)
    if len(x_val) == 0:
        raise ParameterError("validation set is empty")

    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    c, d = len(label_space), x_train.shape[1]
    model = RefModel(np.zeros((c, d)), np.zeros(c), label_space, mean, scale)
    best = (model.weights.copy(), model.bias.copy())

    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience, "max" if cfg.monitor == "validation_accuracy" else "min")
    report = TrainReport(cfg.monitor)
    for epoch in range(1, cfg.max_epochs + 1):
        if epoch > 1 and callable(train_set):
            x_train, train_labels = source(epoch)
            y_train = label_indices(train_labels, label_space)
        xn = model.normalize(np.asarray(x_train, dtype=np.float64))
        order = rng.permutation(len(xn))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = _loss_grad(model.weights, model.bias, xn[idx], y_train[idx])
            total += loss * len(idx)
            model.weights -= cfg.learning_rate * gw
            model.bias -= cfg.learning_rate * gb
        metrics = _evaluate(model, x_val, y_val)
        value = metrics[cfg.monitor]
        if stopper.update(value, epoch):
            best = (model.weights.copy(), model.bias.copy())
        report.epochs.append({"epoch": epoch, "train_loss": total / len(order), **metrics})
        log.debug("epoch %d train_loss=%.5f %s=%.5f", epoch, total / len(order), cfg.monitor, value)
        if stopper.should_stop:
            report.stopped_early = True
            break
    model.weights, model.bias = best
    report.best_epoch = stopper.best_epoch
    return model, report
