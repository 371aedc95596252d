"""Flat parameter-vector arithmetic and deterministic random streams.

Every model in the simulator is a flat float64 vector with a named-segment
layout. All reductions that feed the aggregation-weight formula use
compensated summation (math.fsum / Kahan) so results are reproducible and
stable even when squared distances get tiny near convergence.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import LayoutError

Layout = tuple[tuple[str, tuple[int, ...]], ...]

_U64 = (1 << 64) - 1


def _segment_size(shape: tuple[int, ...]) -> int:
    size = 1
    for n in shape:
        size *= int(n)
    return size


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus its (name, shape) segment layout.

    Instances are treated as immutable: every public operation returns a new
    vector and never writes through `values`.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise LayoutError(f"parameter vector must be 1-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        layout = tuple((str(name), tuple(int(n) for n in shape)) for name, shape in self.layout)
        object.__setattr__(self, "layout", layout)
        total = sum(_segment_size(shape) for _, shape in layout)
        if total != values.size:
            raise LayoutError(f"layout covers {total} elements but vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise LayoutError("parameter vector contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def segments(self) -> dict[str, np.ndarray]:
        """Reshaped views of each named segment, in layout order."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            size = _segment_size(shape)
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @staticmethod
    def from_segments(layout: Layout, arrays: dict[str, np.ndarray]) -> "ParamVector":
        parts = [np.asarray(arrays[name], dtype=np.float64).reshape(-1) for name, _ in layout]
        flat = np.concatenate(parts) if parts else np.zeros(0)
        return ParamVector(flat, layout)


def _require_same_layout(a: ParamVector, b: ParamVector):
    if a.layout != b.layout:
        raise LayoutError("parameter vectors have different layouts and cannot be combined")


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return alpha * x + y without modifying the inputs."""
    _require_same_layout(x, y)
    if alpha == 0.0:
        return y.copy()
    return ParamVector(alpha * x.values + y.values, y.layout)


def sq_dist(a: ParamVector, b: ParamVector) -> float:
    """Squared Euclidean distance, reduced with exact (fsum) summation."""
    _require_same_layout(a, b)
    diff = a.values - b.values
    return math.fsum((diff * diff).tolist())


def dot(a: ParamVector, b: ParamVector) -> float:
    """Inner product, reduced with exact (fsum) summation."""
    _require_same_layout(a, b)
    return math.fsum((a.values * b.values).tolist())


def weighted_sum(weights, vectors) -> ParamVector:
    """Return sum_j weights[j] * vectors[j] with Kahan-compensated terms.

    The compensation runs over the term index, vectorized over elements, so a
    one-hot weight vector reproduces the selected vector exactly.
    """
    weights = list(weights)
    vectors = list(vectors)
    if not vectors or len(weights) != len(vectors):
        raise LayoutError("weighted_sum needs equally many weights and vectors, at least one each")
    first = vectors[0]
    for v in vectors[1:]:
        _require_same_layout(first, v)
    total = np.zeros(first.dim)
    comp = np.zeros(first.dim)
    for w, v in zip(weights, vectors):
        term = float(w) * v.values - comp
        new_total = total + term
        comp = (new_total - total) - term
        total = new_total
    return ParamVector(total, first.layout)


def _label_entropy(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _U64
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class Rng:
    """Seedable random source with named, independent sub-streams.

    `stream("batch", t, client)` always yields the same PCG64 generator for
    the same seed and labels, so changing how one stage draws randomness
    (e.g. participation) cannot perturb another (e.g. batching).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *labels) -> np.random.Generator:
        entropy = [self.seed & _U64] + [_label_entropy(label) for label in labels]
        return np.random.default_rng(np.random.SeedSequence(entropy))
