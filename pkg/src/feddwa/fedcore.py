"""Round-based federated training engine shared by every method.

The engine owns client state, partial participation, traffic/compute
accounting, and per-round evaluation. Method-specific aggregation lives in
`dwa` (dynamic weight adjustment) and `baselines`; both are driven from
`run`. Every run is a deterministic function of its RunConfig: all
randomness flows through named sub-streams of a single seed, and batching /
participation streams are method-independent so cross-method comparisons
stay paired.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LayoutError, TrainingDiverged
from .models import Dataset, ModelSpec, accuracy, grad, init_params
from .numkit import ParamVector, Rng, axpy, weighted_sum

BYTES_PER_PARAM = 8  # float64 wire format

TRAFFIC_MULTIPLIER = {
    "feddwa": 3,  # uplink trained + guidance, downlink personalized model
    "fedavg": 2,
    "fedprox": 2,
    "fedavg_ft": 2,
    "local": 0,
}


@dataclass
class ClientState:
    """One client's shards, personalized model, and local-training knobs."""

    id: int
    train: Dataset
    test: Dataset
    model: ParamVector
    lr: float
    batch_size: int
    local_epochs: int

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("batch_size and local_epochs must be >= 1")


class TrafficLedger:
    """Per-round, per-client uplink/downlink byte counts in model-size units."""

    def __init__(self, model_size_bytes: int):
        self.model_size_bytes = int(model_size_bytes)
        self._cells: dict[tuple[int, int], list[int]] = {}

    def add(self, round_index: int, client_id: int, direction: str, n_models: int):
        if n_models < 0:
            raise ConfigError("traffic model count must be nonnegative")
        if direction not in ("up", "down"):
            raise ConfigError(f"direction must be 'up' or 'down', got {direction!r}")
        cell = self._cells.setdefault((round_index, client_id), [0, 0])
        cell[0 if direction == "up" else 1] += n_models * self.model_size_bytes

    def client_bytes(self, round_index: int, client_id: int) -> tuple[int, int]:
        up, down = self._cells.get((round_index, client_id), (0, 0))
        return up, down

    def round_totals(self, round_index: int) -> tuple[int, int]:
        up = down = 0
        for (t, _), (u, d) in self._cells.items():
            if t == round_index:
                up += u
                down += d
        return up, down

    def totals(self) -> tuple[int, int]:
        up = sum(u for u, _ in self._cells.values())
        down = sum(d for _, d in self._cells.values())
        return up, down


def record_traffic(ledger: TrafficLedger, round_index: int, client_id: int,
                   direction: str, n_models: int):
    """Charge `n_models` model transfers to one client in one round."""
    ledger.add(round_index, client_id, direction, n_models)


@dataclass
class RoundReport:
    """Everything the reporting layer needs about one communication round."""

    round_index: int
    per_client_accuracy: list[float]
    mean_accuracy: float
    per_client_uplink: list[int]
    per_client_downlink: list[int]
    uplink_bytes: int
    downlink_bytes: int
    server_flops: int
    duration_s: float
    weights: "object | None" = None  # dwa.WeightMatrix for feddwa rounds


def select_participants(num_clients: int, fraction: float,
                        rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, round(fraction*N)) ids."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("participation fraction must lie in (0, 1]")
    size = max(1, int(math.floor(fraction * num_clients + 0.5)))
    chosen = rng.choice(num_clients, size=size, replace=False)
    return sorted(int(i) for i in chosen)


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(client: ClientState, start: ParamVector, spec: ModelSpec,
                rng: np.random.Generator, prox_mu: float = 0.0,
                prox_center: ParamVector | None = None,
                epochs: int | None = None) -> ParamVector:
    """Mini-batch SGD from `start`: E epochs of seeded-shuffle batches.

    The final partial batch is kept. With prox_mu > 0 the gradient gains the
    proximal pull mu * (w - prox_center). `start` is never modified.
    """
    epochs = client.local_epochs if epochs is None else epochs
    current = start.copy()
    for epoch in range(epochs):
        for batch_idx in _iter_batches(client.train.n, client.batch_size, rng):
            batch = client.train.subset(batch_idx)
            try:
                gradient = grad(current, batch, spec)
                if prox_mu != 0.0:
                    pull = axpy(-1.0, prox_center, current)
                    gradient = axpy(prox_mu, pull, gradient)
                current = axpy(-client.lr, gradient, current)
            except LayoutError as err:  # non-finite parameters abort the run
                raise TrainingDiverged(
                    f"client {client.id} diverged in epoch {epoch + 1}: {err}"
                ) from err
    return current


def _mean_accuracy(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def _evaluate_all(clients: list[ClientState], spec: ModelSpec,
                  model_for=None) -> list[float]:
    if model_for is None:
        return [accuracy(c.model, c.test, spec) for c in clients]
    return [accuracy(model_for(c), c.test, spec) for c in clients]


def _report(round_index, ledger, clients, accs, flops, started, weights=None) -> RoundReport:
    ups, downs = [], []
    for c in clients:
        up, down = ledger.client_bytes(round_index, c.id)
        ups.append(up)
        downs.append(down)
    return RoundReport(
        round_index=round_index,
        per_client_accuracy=accs,
        mean_accuracy=_mean_accuracy(accs),
        per_client_uplink=ups,
        per_client_downlink=downs,
        uplink_bytes=sum(ups),
        downlink_bytes=sum(downs),
        server_flops=flops,
        duration_s=time.perf_counter() - started,
        weights=weights,
    )


def run(config, fed=None, capture: dict | None = None) -> list[RoundReport]:
    """Execute T rounds of the configured method and report each round.

    `fed` may carry prebuilt FederatedData (the CLI/service build it once to
    export manifests); otherwise it is derived from the config. When a dict
    is passed as `capture`, the final per-client models and the traffic
    ledger are stored into it for inspection.
    """
    from . import baselines, dwa  # method modules import fedcore, so bind late

    rng = Rng(config.seed)
    if fed is None:
        fed = config.build_data(rng)
    if fed.num_clients != config.clients:
        raise ConfigError(
            f"data provides {fed.num_clients} clients but config expects {config.clients}"
        )
    spec = config.model_spec(
        input_dim=fed.shards[0].train.features.shape[1],
        num_classes=fed.num_classes,
    )
    shared_start = init_params(spec, rng.stream("init"))
    clients = [
        ClientState(
            id=i,
            train=shard.train,
            test=shard.test,
            model=shared_start.copy(),
            lr=config.lr,
            batch_size=config.batch_size,
            local_epochs=config.local_epochs,
        )
        for i, shard in enumerate(fed.shards)
    ]
    ledger = TrafficLedger(spec.param_count() * BYTES_PER_PARAM)
    runners = {
        "feddwa": _run_feddwa,
        "fedavg": _run_global,
        "fedprox": _run_global,
        "fedavg_ft": _run_global,
        "local": _run_local,
    }
    if config.method not in runners:
        raise ConfigError(f"unknown method {config.method!r}")
    reports = runners[config.method](config, clients, spec, rng, ledger, baselines, dwa)
    if capture is not None:
        capture["final_models"] = [c.model for c in clients]
        capture["ledger"] = ledger
        capture["spec"] = spec
    return reports


def _round_participants(config, rng, t) -> list[int]:
    return select_participants(config.clients, config.fraction,
                               rng.stream("participation", t))


def _run_feddwa(config, clients, spec, rng, ledger, baselines, dwa) -> list[RoundReport]:
    guidance_cfg = config.guidance_config()
    last_uploads: dict[int, ParamVector] = {}
    reports = []
    for t in range(1, config.rounds + 1):
        started = time.perf_counter()
        participants = _round_participants(config, rng, t)
        starts = {i: clients[i].model for i in participants}
        uploads, guidances = {}, {}
        for i in participants:
            record_traffic(ledger, t, i, "down", 1)
            try:
                trained = local_train(clients[i], starts[i], spec, rng.stream("batch", t, i))
                guide = dwa.guidance_model(
                    clients[i], trained, guidance_cfg, spec,
                    rng=rng.stream("guidance", t, i),
                    previous=last_uploads.get(i),
                )
            except TrainingDiverged as err:
                raise TrainingDiverged(f"round {t}: {err}") from err
            uploads[i] = trained
            guidances[i] = guide
            record_traffic(ledger, t, i, "up", 2)

        upload_list = [uploads[j] for j in participants]
        if t == 1:
            # Every client trained from the shared initial model, so there is
            # no similarity signal yet: rows computed over the identical
            # start models degrade to exact uniform via the zero-distance
            # rule and the round coincides with FedAvg. Top-K of an all-tied
            # row would be arbitrary, so it is skipped for this round.
            rows = [
                dwa.compute_weights(starts[i], [starts[j] for j in participants])
                for i in participants
            ]
        else:
            k_eff = min(config.k, len(participants))
            rows = [
                dwa.top_k(dwa.compute_weights(guidances[i], upload_list), k_eff)
                for i in participants
            ]

        full = np.eye(config.clients)
        for row, i in zip(rows, participants):
            full[i, :] = 0.0
            full[i, participants] = row
        weights = dwa.WeightMatrix(full, t)

        for row, i in zip(rows, participants):
            clients[i].model = weighted_sum(row, upload_list)
            last_uploads[i] = uploads[i]

        flops = len(participants) ** 2 * spec.param_count()
        accs = _evaluate_all(clients, spec)
        reports.append(_report(t, ledger, clients, accs, flops, started, weights))
    return reports


def _run_global(config, clients, spec, rng, ledger, baselines, dwa) -> list[RoundReport]:
    method = config.method
    global_model = clients[0].model.copy()
    reports = []
    for t in range(1, config.rounds + 1):
        started = time.perf_counter()
        participants = _round_participants(config, rng, t)
        uploads, sizes = [], []
        for i in participants:
            record_traffic(ledger, t, i, "down", 1)
            try:
                if method == "fedprox":
                    trained = baselines.fedprox_local(
                        clients[i], global_model, config.mu, spec, rng.stream("batch", t, i)
                    )
                else:
                    trained = local_train(
                        clients[i], global_model, spec, rng.stream("batch", t, i)
                    )
            except TrainingDiverged as err:
                raise TrainingDiverged(f"round {t}: {err}") from err
            uploads.append(trained)
            sizes.append(clients[i].train.n)
            record_traffic(ledger, t, i, "up", 1)
        if config.weight_by_data_size:
            total = sum(sizes)
            agg_weights = [s / total for s in sizes]
        else:
            agg_weights = None
        global_model = baselines.fedavg_round(uploads, agg_weights)

        flops = len(participants) * spec.param_count()
        if method == "fedavg_ft":
            accs = baselines.fedavg_ft_eval(
                global_model, clients, config.ft_epochs, spec,
                lambda i, _t=t: rng.stream("finetune", _t, i),
            )
        else:
            accs = _evaluate_all(clients, spec, model_for=lambda c: global_model)
        reports.append(_report(t, ledger, clients, accs, flops, started))
    return reports


def _run_local(config, clients, spec, rng, ledger, baselines, dwa) -> list[RoundReport]:
    reports = []
    for t in range(1, config.rounds + 1):
        started = time.perf_counter()
        participants = _round_participants(config, rng, t)
        try:
            baselines.local_only_round(
                clients, participants, spec, lambda i, _t=t: rng.stream("batch", _t, i)
            )
        except TrainingDiverged as err:
            raise TrainingDiverged(f"round {t}: {err}") from err
        accs = _evaluate_all(clients, spec)
        reports.append(_report(t, ledger, clients, accs, 0, started))
    return reports
