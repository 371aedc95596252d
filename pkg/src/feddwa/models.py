"""Supervised models with hand-coded loss and gradient.

Two architectures cover the simulator's needs: multinomial softmax
regression and a one-hidden-layer tanh MLP. Both are pure functions of a
flat ParamVector, so aggregation arithmetic never has to know about shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .numkit import Layout, ParamVector

SOFTMAX = "softmax"
MLP = "mlp"


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n x f) with integer class labels in [0, C)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise DataError("labels must be a vector with one entry per feature row")
        if features.shape[0] < 1:
            raise DataError("dataset must contain at least one sample")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        if labels.min(initial=0) < 0:
            raise DataError("labels must be nonnegative class indices")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description from which the parameter layout derives."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int | None = None
    init_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in (SOFTMAX, MLP):
            raise DataError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise DataError("input_dim must be >= 1 and num_classes >= 2")
        if self.kind == MLP and (self.hidden_dim is None or self.hidden_dim < 1):
            raise DataError("mlp requires a positive hidden_dim")
        if self.init_scale < 0:
            raise DataError("init_scale must be nonnegative")

    def layout(self) -> Layout:
        f, c = self.input_dim, self.num_classes
        if self.kind == SOFTMAX:
            return (("w", (c, f)), ("b", (c,)))
        h = int(self.hidden_dim)
        return (("w1", (h, f)), ("b1", (h,)), ("w2", (c, h)), ("b2", (c,)))

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform draw in [-init_scale, init_scale] over the spec's layout."""
    d = spec.param_count()
    if spec.init_scale == 0.0:
        values = np.zeros(d)
    else:
        values = rng.uniform(-spec.init_scale, spec.init_scale, size=d)
    return ParamVector(values, spec.layout())


def _check_batch(batch: Dataset, spec: ModelSpec):
    if batch.features.shape[1] != spec.input_dim:
        raise DataError(
            f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}"
        )
    if batch.labels.max() >= spec.num_classes:
        raise DataError("batch contains a label outside the model's class range")


def _forward_logits(params: ParamVector, x: np.ndarray, spec: ModelSpec):
    seg = params.segments()
    if spec.kind == SOFTMAX:
        return x @ seg["w"].T + seg["b"], None
    hidden = np.tanh(x @ seg["w1"].T + seg["b1"])
    return hidden @ seg["w2"].T + seg["b2"], hidden


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(params: ParamVector, batch: Dataset, spec: ModelSpec) -> float:
    """Mean cross-entropy of the batch under the model."""
    _check_batch(batch, spec)
    logits, _ = _forward_logits(params, batch.features, spec)
    log_probs = _log_softmax(logits)
    picked = log_probs[np.arange(batch.n), batch.labels]
    return float(-picked.mean())


def grad(params: ParamVector, batch: Dataset, spec: ModelSpec) -> ParamVector:
    """Gradient of the mean cross-entropy, same layout as `params`."""
    _check_batch(batch, spec)
    x, y = batch.features, batch.labels
    logits, hidden = _forward_logits(params, x, spec)
    probs = np.exp(_log_softmax(logits))
    delta = probs
    delta[np.arange(batch.n), y] -= 1.0
    delta /= batch.n
    seg = params.segments()
    if spec.kind == SOFTMAX:
        return ParamVector.from_segments(
            params.layout, {"w": delta.T @ x, "b": delta.sum(axis=0)}
        )
    d_hidden = (delta @ seg["w2"]) * (1.0 - hidden * hidden)
    return ParamVector.from_segments(
        params.layout,
        {
            "w1": d_hidden.T @ x,
            "b1": d_hidden.sum(axis=0),
            "w2": delta.T @ hidden,
            "b2": delta.sum(axis=0),
        },
    )


def accuracy(params: ParamVector, data: Dataset, spec: ModelSpec) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    _check_batch(data, spec)
    logits, _ = _forward_logits(params, data.features, spec)
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == data.labels))
