"""Synthetic task generation and heterogeneous data partitioning.

Three partition schemes cover the usual non-IID settings: pathological
(few classes per client), dominant-class (grouped clients sharing a set of
dominant classes), and symmetric-Dirichlet label skew. `synth_clusters`
builds a desk-scale task with ground-truth group structure for weight-matrix
diagnostics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .models import Dataset

TEST_FRACTION = 0.2

PATHOLOGICAL = "pathological"
DOMINANT = "dominant_class"
DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class PartitionSpec:
    """Declarative description of one heterogeneity setting plus seed.

    Only the fields of the chosen setting are read; `validate` rejects
    configurations that are structurally impossible.
    """

    setting: str
    num_clients: int
    classes_per_client: int | None = None
    num_groups: int | None = None
    dominant_fraction: float | None = None
    dominant_per_group: int | None = None
    samples_per_client: int | None = None
    alpha: float | None = None
    min_per_client: int = 2
    seed: int = 0

    def validate(self):
        if self.num_clients < 2:
            raise DataError("partitioning requires at least 2 clients")
        if self.min_per_client < 2:
            raise DataError("min_per_client must be >= 2 to allow a train/test split")
        if self.setting == PATHOLOGICAL:
            if not self.classes_per_client or self.classes_per_client < 1:
                raise DataError("pathological setting requires classes_per_client >= 1")
        elif self.setting == DOMINANT:
            if not self.num_groups or self.num_groups < 1:
                raise DataError("dominant_class setting requires num_groups >= 1")
            if self.num_clients % self.num_groups != 0:
                raise DataError("num_clients must be divisible by num_groups")
            s = self.dominant_fraction
            if s is None or not (0.0 < s <= 1.0):
                raise DataError("dominant_fraction must lie in (0, 1]")
        elif self.setting == DIRICHLET:
            if self.alpha is None or self.alpha <= 0:
                raise DataError("dirichlet setting requires alpha > 0")
        else:
            raise DataError(f"unknown partition setting {self.setting!r}")


@dataclass(frozen=True)
class ClientShard:
    train: Dataset
    test: Dataset


@dataclass
class FederatedData:
    """Per-client shards plus bookkeeping for inspection and tests."""

    shards: list[ClientShard]
    class_map: list[np.ndarray]
    num_classes: int
    group_truth: list[int] | None = None
    source_rows: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def num_clients(self) -> int:
        return len(self.shards)


def _class_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(labels, minlength=num_classes).astype(np.int64)


def total_variation(h1: np.ndarray, h2: np.ndarray) -> float:
    """TV distance between two count histograms (as distributions)."""
    p = h1 / max(h1.sum(), 1)
    q = h2 / max(h2.sum(), 1)
    return 0.5 * float(np.abs(p - q).sum())


def split_train_test(features: np.ndarray, labels: np.ndarray,
                     rng: np.random.Generator, test_fraction: float = TEST_FRACTION):
    """Stratified split keeping the test label distribution close to train.

    Guarantees both sides nonempty for inputs with at least two samples.
    """
    n = labels.shape[0]
    if n < 2:
        raise DataError("need at least 2 samples to split into train and test")
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        n_test = min(n_test, members.size - 1)
        test_idx.extend(members[:n_test].tolist())
        train_idx.extend(members[n_test:].tolist())
    if not test_idx:
        # tiny shard: move one sample of the most common class over
        counts = np.bincount(labels)
        donor_class = int(np.argmax(counts))
        donor = next(i for i in train_idx if labels[i] == donor_class)
        train_idx.remove(donor)
        test_idx.append(donor)
    train_idx = np.array(sorted(train_idx), dtype=np.int64)
    test_idx = np.array(sorted(test_idx), dtype=np.int64)
    return (
        Dataset(features[train_idx], labels[train_idx]),
        Dataset(features[test_idx], labels[test_idx]),
        train_idx,
        test_idx,
    )


def synth_blobs(num_classes: int, num_features: int, samples_per_class: int,
                rng: np.random.Generator, center_scale: float = 2.0,
                spread: float = 1.0) -> Dataset:
    """Gaussian-blob classification base set, one isotropic blob per class."""
    centers = rng.normal(0.0, center_scale, size=(num_classes, num_features))
    feats = []
    labels = []
    for c in range(num_classes):
        feats.append(centers[c] + spread * rng.normal(size=(samples_per_class, num_features)))
        labels.append(np.full(samples_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(feats), np.concatenate(labels))


def _sample_linear_task(weights: np.ndarray, count: int, margin: float,
                        noise: float, rng: np.random.Generator):
    """Draw `count` points labeled by argmax of a linear map.

    Points whose top-two logit gap is below `margin` are rejected, so the
    noise-free task is separable; label flips are applied afterwards.
    """
    num_classes, num_features = weights.shape
    feats = np.empty((count, num_features))
    labels = np.empty(count, dtype=np.int64)
    filled = 0
    while filled < count:
        chunk = max(4 * (count - filled), 16)
        x = rng.normal(size=(chunk, num_features))
        logits = x @ weights.T
        top2 = np.sort(logits, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) >= margin
        x = x[keep]
        take = min(x.shape[0], count - filled)
        feats[filled : filled + take] = x[:take]
        labels[filled : filled + take] = np.argmax(x[:take] @ weights.T, axis=1)
        filled += take
    if noise > 0:
        flip = rng.random(count) < noise
        shift = rng.integers(1, num_classes, size=count)
        labels[flip] = (labels[flip] + shift[flip]) % num_classes
    return feats, labels


def synth_clusters(num_groups: int, clients_per_group: int, num_features: int,
                   num_classes: int, n_per_client: int, noise: float,
                   rng: np.random.Generator, margin: float = 0.2) -> FederatedData:
    """Clients grouped by shared ground-truth linear labeling functions.

    Clients inside a group draw i.i.d. from their group's distribution, so
    the group id is usable as ground truth for similarity diagnostics.
    """
    if min(num_groups, clients_per_group, num_features, n_per_client) < 1 or num_classes < 2:
        raise DataError("synth_clusters needs positive counts and at least 2 classes")
    if noise < 0:
        raise DataError("label noise must be nonnegative")
    shards = []
    class_map = []
    group_truth = []
    n_test = max(1, n_per_client // 4)
    for g in range(num_groups):
        group_w = rng.normal(size=(num_classes, num_features)) / math.sqrt(num_features)
        for _ in range(clients_per_group):
            train_x, train_y = _sample_linear_task(group_w, n_per_client, margin, noise, rng)
            test_x, test_y = _sample_linear_task(group_w, n_test, margin, noise, rng)
            shards.append(ClientShard(Dataset(train_x, train_y), Dataset(test_x, test_y)))
            class_map.append(_class_histogram(np.concatenate([train_y, test_y]), num_classes))
            group_truth.append(g)
    return FederatedData(shards, class_map, num_classes, group_truth)


def _resolve_rng(spec: PartitionSpec, rng: np.random.Generator | None) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(np.random.SeedSequence(spec.seed))


def _build_federated(base: Dataset, allocations: list[np.ndarray], num_classes: int,
                     rng: np.random.Generator, group_truth: list[int] | None) -> FederatedData:
    shards = []
    class_map = []
    source_rows = []
    for rows in allocations:
        train, test, train_local, test_local = split_train_test(
            base.features[rows], base.labels[rows], rng
        )
        shards.append(ClientShard(train, test))
        class_map.append(_class_histogram(base.labels[rows], num_classes))
        source_rows.append(np.concatenate([rows[train_local], rows[test_local]]))
    return FederatedData(shards, class_map, num_classes, group_truth, source_rows)


def partition_pathological(base: Dataset, spec: PartitionSpec,
                           rng: np.random.Generator | None = None) -> FederatedData:
    """Each client holds exactly `classes_per_client` classes, equal counts per class."""
    spec.validate()
    if spec.setting != PATHOLOGICAL:
        raise DataError("spec.setting must be 'pathological'")
    rng = _resolve_rng(spec, rng)
    num_classes = int(base.labels.max()) + 1
    k = int(spec.classes_per_client)
    if k > num_classes:
        raise DataError(f"classes_per_client={k} exceeds the {num_classes} available classes")

    chosen = [np.sort(rng.choice(num_classes, size=k, replace=False)) for _ in range(spec.num_clients)]
    demand = np.zeros(num_classes, dtype=np.int64)
    for classes in chosen:
        demand[classes] += 1
    supply = _class_histogram(base.labels, num_classes)
    per_client_per_class = None
    for c in range(num_classes):
        if demand[c] == 0:
            continue
        avail = supply[c] // demand[c]
        per_client_per_class = avail if per_client_per_class is None else min(per_client_per_class, avail)
    if not per_client_per_class:
        raise DataError("insufficient class supply for the requested pathological partition")
    if per_client_per_class * k < spec.min_per_client:
        raise DataError("pathological shards would fall below min_per_client")

    pools = {c: rng.permutation(np.flatnonzero(base.labels == c)) for c in range(num_classes)}
    cursor = {c: 0 for c in range(num_classes)}
    allocations = []
    for classes in chosen:
        rows = []
        for c in classes:
            start = cursor[c]
            rows.append(pools[c][start : start + per_client_per_class])
            cursor[c] = start + per_client_per_class
        allocations.append(np.concatenate(rows))
    return _build_federated(base, allocations, num_classes, rng, None)


def dominant_class_blocks(num_classes: int, num_groups: int,
                          dominant_per_group: int | None = None) -> list[np.ndarray]:
    """Contiguous dominant-class blocks per group.

    The derived default size keeps blocks disjoint; an explicit larger size
    wraps modulo the class count and may overlap adjacent groups.
    """
    size = dominant_per_group if dominant_per_group is not None else num_classes // num_groups
    if size < 1:
        raise DataError("each group needs at least one dominant class")
    if size > num_classes:
        raise DataError("dominant_per_group exceeds the number of classes")
    return [np.array([(g * size + j) % num_classes for j in range(size)]) for g in range(num_groups)]


def partition_dominant(base: Dataset, spec: PartitionSpec,
                       rng: np.random.Generator | None = None) -> FederatedData:
    """Fraction s of each shard from the client's group-dominant classes, rest uniform."""
    spec.validate()
    if spec.setting != DOMINANT:
        raise DataError("spec.setting must be 'dominant_class'")
    rng = _resolve_rng(spec, rng)
    num_classes = int(base.labels.max()) + 1
    num_groups = int(spec.num_groups)
    if num_groups > num_classes:
        raise DataError("more groups than classes")
    blocks = dominant_class_blocks(num_classes, num_groups, spec.dominant_per_group)

    shard_size = spec.samples_per_client or base.n // spec.num_clients
    if shard_size * spec.num_clients > base.n:
        raise DataError("samples_per_client exceeds the available supply")
    if shard_size < spec.min_per_client:
        raise DataError("base dataset too small for equal shards of min_per_client samples")
    n_dominant = int(math.floor(spec.dominant_fraction * shard_size + 0.5))
    n_uniform = shard_size - n_dominant
    clients_per_group = spec.num_clients // num_groups

    used = np.zeros(base.n, dtype=bool)
    dominant_rows = []
    for i in range(spec.num_clients):
        block = blocks[i // clients_per_group]
        candidates = np.flatnonzero(~used & np.isin(base.labels, block))
        if candidates.size < n_dominant:
            raise DataError(f"insufficient dominant-class samples for client {i}")
        picks = rng.choice(candidates, size=n_dominant, replace=False)
        used[picks] = True
        dominant_rows.append(np.sort(picks))
    allocations = []
    for i in range(spec.num_clients):
        candidates = np.flatnonzero(~used)
        if candidates.size < n_uniform:
            raise DataError(f"insufficient samples for the uniform part of client {i}")
        picks = rng.choice(candidates, size=n_uniform, replace=False)
        used[picks] = True
        allocations.append(np.concatenate([dominant_rows[i], np.sort(picks)]))
    group_truth = [i // clients_per_group for i in range(spec.num_clients)]
    return _build_federated(base, allocations, num_classes, rng, group_truth)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of `total` following `proportions` exactly."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    deficit = total - int(counts.sum())
    if deficit > 0:
        remainders = raw - counts
        order = np.lexsort((np.arange(proportions.size), -remainders))
        counts[order[:deficit]] += 1
    return counts


def partition_dirichlet(base: Dataset, spec: PartitionSpec,
                        rng: np.random.Generator | None = None) -> FederatedData:
    """Per-class Dirichlet(alpha) allocation across clients.

    Allocations leaving any client below `min_per_client` samples are
    rejected and redrawn in full, up to 100 attempts.
    """
    spec.validate()
    if spec.setting != DIRICHLET:
        raise DataError("spec.setting must be 'dirichlet'")
    rng = _resolve_rng(spec, rng)
    num_classes = int(base.labels.max()) + 1
    n_clients = spec.num_clients
    supply = _class_histogram(base.labels, num_classes)

    counts = None
    for _ in range(100):
        candidate = np.zeros((num_classes, n_clients), dtype=np.int64)
        for c in range(num_classes):
            proportions = rng.dirichlet(np.full(n_clients, spec.alpha))
            candidate[c] = _largest_remainder(proportions, int(supply[c]))
        if candidate.sum(axis=0).min() >= spec.min_per_client:
            counts = candidate
            break
    if counts is None:
        raise DataError(
            "dirichlet allocation kept starving a client after 100 attempts; "
            "increase data volume or alpha"
        )

    per_client_rows = [[] for _ in range(n_clients)]
    for c in range(num_classes):
        pool = rng.permutation(np.flatnonzero(base.labels == c))
        start = 0
        for m in range(n_clients):
            take = int(counts[c, m])
            per_client_rows[m].append(pool[start : start + take])
            start += take
    allocations = [np.concatenate(rows) for rows in per_client_rows]
    return _build_federated(base, allocations, num_classes, rng, None)


def partition(base: Dataset, spec: PartitionSpec,
              rng: np.random.Generator | None = None) -> FederatedData:
    """Dispatch to the partitioner named by `spec.setting`."""
    handlers = {
        PATHOLOGICAL: partition_pathological,
        DOMINANT: partition_dominant,
        DIRICHLET: partition_dirichlet,
    }
    spec.validate()
    return handlers[spec.setting](base, spec, rng)


@dataclass(frozen=True)
class CsvSchema:
    """How to interpret a CSV file: features..., integer label last."""

    scale: bool = True
    num_classes: int | None = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Load `features..., label` rows; optionally min-max scale each column."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for line_no, record in enumerate(csv.reader(fh), start=1):
            if not record:
                continue
            if width is None:
                width = len(record)
                if width < 2:
                    raise DataError(f"line {line_no}: need at least one feature and a label")
            elif len(record) != width:
                raise DataError(f"line {line_no}: expected {width} columns, got {len(record)}")
            values = []
            for col_no, cell in enumerate(record, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"line {line_no}, column {col_no}: non-numeric value {cell!r}"
                    ) from None
            label = values[-1]
            if label != int(label) or label < 0:
                raise DataError(f"line {line_no}: label must be a nonnegative integer")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    features, labels = data[:, :-1], data[:, -1].astype(np.int64)
    if schema.num_classes is not None and labels.max() >= schema.num_classes:
        raise DataError(
            f"label {int(labels.max())} out of range for {schema.num_classes} classes"
        )
    if schema.scale:
        lo = features.min(axis=0)
        span = features.max(axis=0) - lo
        span[span == 0] = 1.0
        features = (features - lo) / span
    return Dataset(features, labels)


def format_manifest(fed: FederatedData) -> str:
    """Human-readable per-client class histograms and group ids."""
    lines = [f"clients={fed.num_clients} classes={fed.num_classes}"]
    for i, hist in enumerate(fed.class_map):
        group = "" if fed.group_truth is None else f" group={fed.group_truth[i]}"
        counts = " ".join(f"{c}:{int(n)}" for c, n in enumerate(hist) if n)
        lines.append(
            f"client {i}:{group} train={fed.shards[i].train.n} "
            f"test={fed.shards[i].test.n} classes[{counts}]"
        )
    return "\n".join(lines) + "\n"
