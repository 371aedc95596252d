"""Run configuration: defaults, validation, YAML files, and flag overrides.

A RunConfig is the single source of truth for an experiment; the engine, the
CLI, and the HTTP service all consume the same model. Validation failures
always name the offending key.
"""

from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import datagen
from .dwa import GuidanceConfig
from .errors import ConfigError
from .models import ModelSpec

SWEEP_AXES = ("K", "alpha", "adapt_steps", "s")


class GuidanceOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["one_step_ahead", "last_iteration", "current"] = "one_step_ahead"
    adapt_steps: int = Field(default=1, ge=1)
    adapt_batch: Literal["full", "minibatch"] = "full"


class ModelOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["softmax", "mlp"] = "softmax"
    hidden_dim: int = Field(default=16, ge=1)
    init_scale: float = Field(default=0.05, ge=0.0)


class DataOptions(BaseModel):
    """Which task to build: grouped synthetic clusters, or a base dataset
    (Gaussian blobs or a CSV file) split by one of the partition schemes."""

    model_config = ConfigDict(extra="forbid")

    scheme: Literal["clusters", "pathological", "dominant", "dirichlet"] = "clusters"
    features: int = Field(default=12, ge=1)
    classes: int = Field(default=6, ge=2)
    # clusters scheme
    num_groups: int = Field(default=4, ge=1)
    n_per_client: int = Field(default=60, ge=4)
    noise: float = Field(default=0.05, ge=0.0)
    # base dataset for the partition schemes
    samples_per_class: int = Field(default=400, ge=2)
    csv_path: Optional[str] = None
    csv_scale: bool = True
    # partition parameters
    classes_per_client: int = Field(default=2, ge=1)
    dominant_fraction: float = Field(default=0.8, gt=0.0, le=1.0)
    dominant_per_group: Optional[int] = Field(default=None, ge=1)
    alpha: float = Field(default=0.07, gt=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["feddwa", "fedavg", "fedprox", "local", "fedavg_ft"] = "feddwa"
    clients: int = Field(default=20, ge=1)
    rounds: int = Field(default=100, ge=0)
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    lr: float = Field(default=0.01, ge=0.0)
    batch_size: int = Field(default=20, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    k: int = Field(default=5, ge=1)
    mu: float = Field(default=1.0, ge=0.0)
    ft_epochs: int = Field(default=1, ge=1)
    weight_by_data_size: bool = False
    guidance: GuidanceOptions = Field(default_factory=GuidanceOptions)
    model: ModelOptions = Field(default_factory=ModelOptions)
    data: DataOptions = Field(default_factory=DataOptions)
    seed: int = 0
    out: Optional[str] = None
    export_weights: bool = False

    @model_validator(mode="after")
    def _check_cross_fields(self):
        method_fields = {
            "mu": ("fedprox",),
            "ft_epochs": ("fedavg_ft",),
            "k": ("feddwa",),
            "guidance": ("feddwa",),
        }
        for name, methods in method_fields.items():
            if name in self.model_fields_set and self.method not in methods:
                raise ValueError(f"{name} only applies to method {'/'.join(methods)}")
        if self.method == "feddwa" and self.k > self.clients:
            if "k" in self.model_fields_set:
                raise ValueError(f"k={self.k} cannot exceed clients={self.clients}")
            self.k = self.clients  # defaulted k follows small client counts
        if self.data.scheme == "clusters":
            if self.clients % self.data.num_groups != 0:
                raise ValueError(
                    "clients must be divisible by data.num_groups for the clusters scheme"
                )
        else:
            if self.clients < 2:
                raise ValueError("partition schemes need at least 2 clients")
        return self

    # -- domain-object builders -------------------------------------------

    def guidance_config(self) -> GuidanceConfig:
        g = self.guidance
        return GuidanceConfig(mode=g.mode, adapt_steps=g.adapt_steps,
                              adapt_batch=g.adapt_batch)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(
            kind=self.model.kind,
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_dim=self.model.hidden_dim if self.model.kind == "mlp" else None,
            init_scale=self.model.init_scale,
        )

    def partition_spec(self) -> datagen.PartitionSpec:
        d = self.data
        setting = {
            "pathological": datagen.PATHOLOGICAL,
            "dominant": datagen.DOMINANT,
            "dirichlet": datagen.DIRICHLET,
        }[d.scheme]
        return datagen.PartitionSpec(
            setting=setting,
            num_clients=self.clients,
            classes_per_client=d.classes_per_client if d.scheme == "pathological" else None,
            num_groups=d.num_groups if d.scheme == "dominant" else None,
            dominant_fraction=d.dominant_fraction if d.scheme == "dominant" else None,
            dominant_per_group=d.dominant_per_group if d.scheme == "dominant" else None,
            alpha=d.alpha if d.scheme == "dirichlet" else None,
            min_per_client=max(2, self.batch_size),
            seed=self.seed,
        )

    def build_data(self, rng) -> datagen.FederatedData:
        d = self.data
        stream = rng.stream("partition")
        if d.scheme == "clusters":
            return datagen.synth_clusters(
                num_groups=d.num_groups,
                clients_per_group=self.clients // d.num_groups,
                num_features=d.features,
                num_classes=d.classes,
                n_per_client=d.n_per_client,
                noise=d.noise,
                rng=stream,
            )
        if d.csv_path is not None:
            base = datagen.load_csv(d.csv_path, datagen.CsvSchema(scale=d.csv_scale))
        else:
            base = datagen.synth_blobs(
                num_classes=d.classes,
                num_features=d.features,
                samples_per_class=d.samples_per_class,
                rng=rng.stream("base-data"),
            )
        return datagen.partition(base, self.partition_spec(), stream)


def _format_validation_error(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        location = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from a YAML file plus override values.

    Overrides (command-line flags) take precedence over file values, which
    take precedence over defaults.
    """
    payload: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"config file is not valid YAML: {err}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping of keys to values")
        payload = loaded
    if overrides:
        payload = _deep_merge(payload, overrides)
    try:
        return RunConfig(**payload)
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from None


def apply_sweep_value(config: RunConfig, axis: str, value) -> RunConfig:
    """Return a copy of `config` with one sweep axis set to `value`."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    # exclude_unset keeps the per-method field bookkeeping intact
    payload = config.model_dump(exclude_unset=True)
    if axis == "K":
        payload["k"] = int(value)
    elif axis == "alpha":
        payload.setdefault("data", {})["alpha"] = float(value)
    elif axis == "adapt_steps":
        payload.setdefault("guidance", {})["adapt_steps"] = int(value)
    elif axis == "s":
        payload.setdefault("data", {})["dominant_fraction"] = float(value)
    try:
        return RunConfig(**payload)
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from None
