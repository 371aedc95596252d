"""Reference methods sharing the federated engine: FedAvg, FedProx,
local-only training, and FedAvg with evaluation-time fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

from . import fedcore
from .dwa import GuidanceConfig
from .errors import ConfigError
from .models import ModelSpec, accuracy
from .numkit import ParamVector, weighted_sum

METHODS = ("fedavg", "fedprox", "local", "fedavg_ft", "feddwa")


@dataclass(frozen=True)
class MethodConfig:
    """Method name plus exactly the knobs that method uses."""

    method: str
    mu: float | None = None
    ft_epochs: int | None = None
    k: int | None = None
    guidance: GuidanceConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        allowed = {
            "fedavg": set(),
            "local": set(),
            "fedprox": {"mu"},
            "fedavg_ft": {"ft_epochs"},
            "feddwa": {"k", "guidance"},
        }[self.method]
        for name in ("mu", "ft_epochs", "k", "guidance"):
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ConfigError(f"{name} is not a parameter of method {self.method}")
            if value is None and name in allowed:
                raise ConfigError(f"method {self.method} requires {name}")
        if self.mu is not None and self.mu < 0:
            raise ConfigError("mu must be nonnegative")
        if self.ft_epochs is not None and self.ft_epochs < 1:
            raise ConfigError("ft_epochs must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")


def fedavg_round(models, weights=None) -> ParamVector:
    """Aggregate trained models into one global model (uniform by default)."""
    models = list(models)
    if not models:
        raise ConfigError("fedavg aggregation needs at least one participant")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    return weighted_sum(weights, models)


def fedprox_local(client: fedcore.ClientState, start: ParamVector, mu: float,
                  spec: ModelSpec, rng, epochs: int | None = None) -> ParamVector:
    """Local SGD on f_i(w) + (mu/2)||w - start||^2.

    With mu == 0 this takes exactly the plain local-training code path, so it
    is bitwise-equal to `local_train` under the same stream.
    """
    if mu < 0:
        raise ConfigError("mu must be nonnegative")
    return fedcore.local_train(client, start, spec, rng,
                               prox_mu=mu, prox_center=start, epochs=epochs)


def fedavg_ft_eval(global_model: ParamVector, clients, ft_epochs: int,
                   spec: ModelSpec, stream_for) -> list[float]:
    """Per-client accuracy after fine-tuning a throwaway copy of the global.

    The global model itself is never modified; each client tunes its own copy
    for `ft_epochs` on its train shard and reports test accuracy.
    """
    if ft_epochs < 1:
        raise ConfigError("ft_epochs must be >= 1")
    accuracies = []
    for client in clients:
        tuned = fedcore.local_train(client, global_model, spec, stream_for(client.id),
                                    epochs=ft_epochs)
        accuracies.append(accuracy(tuned, client.test, spec))
    return accuracies


def local_only_round(clients, participant_ids, spec: ModelSpec, stream_for):
    """Each participant trains its own stored model; no communication."""
    for i in participant_ids:
        client = clients[i]
        client.model = fedcore.local_train(client, client.model, spec, stream_for(i))
