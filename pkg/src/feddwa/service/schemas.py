"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..config import RunConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig = Field(default_factory=RunConfig)


class RunSummary(BaseModel):
    method: str
    seed: int
    clients: int
    rounds: int
    traffic_multiplier: int
    total_uplink_bytes: int
    total_downlink_bytes: int
    total_traffic_bytes: int
    server_flops: int
    best_mean_accuracy: Optional[float] = None
    best_round: Optional[int] = None
    final_mean_accuracy: Optional[float] = None


class RunResponse(BaseModel):
    status: str
    out_dir: str
    summary: RunSummary
    mean_accuracy_by_round: list[float]


class SweepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: RunConfig = Field(default_factory=RunConfig)
    axis: Literal["K", "alpha", "adapt_steps", "s"]
    values: list[float]


class SweepRow(BaseModel):
    axis: str
    value: float
    status: str
    best_mean_accuracy: Optional[float] = None
    best_round: Optional[int] = None
    total_traffic_bytes: Optional[int] = None
    seed: int
    error: Optional[str] = None


class SweepResponse(BaseModel):
    status: str
    out_dir: str
    rows: list[SweepRow]
