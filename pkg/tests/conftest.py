import numpy as np
import pytest

from feddwa.config import RunConfig
from feddwa.numkit import ParamVector


def random_vector(rng: np.random.Generator, dim: int = 8, scale: float = 1.0) -> ParamVector:
    return ParamVector(scale * rng.normal(size=dim), (("w", (dim,)),))


def cluster_config(**overrides) -> RunConfig:
    """Small grouped-cluster task that trains in well under a second."""
    payload = {
        "method": "feddwa",
        "clients": 8,
        "rounds": 5,
        "batch_size": 10,
        "data": {"scheme": "clusters", "num_groups": 2, "n_per_client": 40,
                 "features": 8, "classes": 4, "noise": 0.0},
        "seed": 7,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(payload.get(key), dict):
            payload[key] = {**payload[key], **value}
        else:
            payload[key] = value
    return RunConfig(**payload)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
