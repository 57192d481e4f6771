import numpy as np
import pytest

from pointcontrast.data import render_synthetic_sample
from pointcontrast.training import TrainConfig


class MemoryDataset:
    """In-memory stand-in for a generated dataset directory."""

    has_gt_masks = True

    def __init__(self, samples):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]


def make_memory_dataset(count=16, size=32, seed=0, shapes=(1, 2)):
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 44])
        sample = render_synthetic_sample(rng, size, shapes)
        sample.sample_id = f"{i:05d}"
        samples.append(sample)
    return MemoryDataset(samples)


def tiny_config(**overrides):
    """Fast defaults for unit tests; override per test."""
    base = dict(
        n=2,
        N=4,
        P=4,
        R=16,
        out_size=32,
        batch_size=4,
        steps=10,
        queue_capacity=16,
        embed_dim=32,
        seed=0,
        warmup_fraction=0.0,
        color_jitter=0.2,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def memory_dataset():
    return make_memory_dataset()
