import numpy as np
import pytest
import torch

from volsynth.config import RunConfig
from volsynth.phantom import Dataset, write_dataset
from volsynth.train import generator_params


def tiny_config(**overrides) -> RunConfig:
    """Miniature brain profile for fast training tests."""
    base = dict(
        profile="tiny", mode="brain", m=4, vol_shape=(16, 16, 16), subjects=24,
        seed=0, channels=(8, 16, 16), codebook_size=32,
        prompt_channels=(8, 16), prompt_hidden=16,
        lambda_pretext=1.0, tau=0.2,
        vae_batch_size=4, vae_learning_rate=1e-3, vae_total_steps=12, vae_warmup_steps=2,
        hidden=24, blocks=2, heads=2, patch=1,
        dit_batch_size=4, dit_learning_rate=3e-4, dit_total_steps=10, dit_warmup_steps=2,
        weight_decay=0.01, ema_decay=0.99, timesteps=20, sampling_steps=5,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg) -> Dataset:
    root = tmp_path_factory.mktemp("tinyds")
    return write_dataset(root, generator_params(tiny_cfg), tiny_cfg.seed, tiny_cfg.subjects)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
