"""
Shared fixtures: a smoke-scale configuration, tiny datasets and networks.
"""

from typing import Any, Dict

import pytest
import torch

from manifold_gan_compression.config import RunConfig, build_config
from manifold_gan_compression.data.datagen import Dataset, generate_splits
from manifold_gan_compression.models.networks import (
    DiscriminatorNet,
    GeneratorNet,
    build_discriminator,
    build_generator,
)

SMOKE: Dict[str, Any] = {
    "seed": 0,
    "data": {"train_count": 24, "val_count": 6, "test_count": 6, "image_size": 16},
    "models": {
        "base_width": 4,
        "depth": 2,
        "n_blocks": 1,
        "disc_depth": 2,
        "disc_base_width": 4,
        "embedding_dim": 8,
        "encoder_width": 4,
    },
    "pretrain": {"steps": 4, "log_every": 1},
    "encoder": {"steps": 4, "batch_size": 8, "log_every": 1},
    "manifold": {"k": 3},
    "pruning": {"batch_size": 4, "agent_input_dim": 8, "agent_hidden_dim": 16, "log_every": 1},
    "ablation": {"seeds": [0]},
    "finetune": {"epochs": 1, "log_every": 1},
    "evaluation": {"batch_size": 8},
}


def smoke_raw(**sections: Dict[str, Any]) -> Dict[str, Any]:
    """Smoke-scale raw config with section fields replaced."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMOKE.items()}
    for name, values in sections.items():
        if isinstance(values, dict):
            raw[name] = {**raw.get(name, {}), **values}
        else:
            raw[name] = values
    return raw


@pytest.fixture
def smoke_cfg() -> RunConfig:
    return build_config(smoke_raw())


@pytest.fixture(scope="session")
def splits() -> Dict[str, Dataset]:
    return generate_splits(build_config(smoke_raw()).data, seed=0)


@pytest.fixture
def train(splits) -> Dataset:
    return splits["train"]


@pytest.fixture
def gen(smoke_cfg) -> GeneratorNet:
    torch.manual_seed(0)
    return build_generator(smoke_cfg.models, smoke_cfg.data.image_size, seed=0)


@pytest.fixture
def disc(smoke_cfg) -> DiscriminatorNet:
    return build_discriminator(smoke_cfg.models, smoke_cfg.data.image_size, seed=0)


@pytest.fixture
def src_batch() -> torch.Tensor:
    """Random source batch in [-1, 1] at smoke resolution."""
    gen = torch.Generator().manual_seed(1234)
    return torch.rand(4, 3, 16, 16, generator=gen) * 2.0 - 1.0
