"""Deterministic personalized federated learning simulator.

Server-side dynamic aggregation-weight adjustment from client guidance
models, plus FedAvg/FedProx/local baselines, heterogeneous partitioners,
and traffic/compute accounting.
"""

__version__ = "0.1.0"

from .config import RunConfig, parse_config
from .datagen import FederatedData, PartitionSpec
from .dwa import GuidanceConfig, WeightMatrix
from .fedcore import ClientState, RoundReport, run
from .models import Dataset, ModelSpec
from .numkit import ParamVector, Rng

__all__ = [
    "__version__",
    "RunConfig",
    "parse_config",
    "FederatedData",
    "PartitionSpec",
    "GuidanceConfig",
    "WeightMatrix",
    "ClientState",
    "RoundReport",
    "run",
    "Dataset",
    "ModelSpec",
    "ParamVector",
    "Rng",
]
