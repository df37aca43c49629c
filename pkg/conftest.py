"""
Shared fixtures for the simulator test suite
"""

import numpy as np
import pytest

from adversary import AttackSpec, ClientPopulation
from data import PartitionSpec, partition_concentration, split_80_10_10, synthetic_blobs
from models import Batch, ModelArch


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_arch():
    return ModelArch('logistic', input_dim=4, num_classes=3)


def build_federation(n_clients=6, num_classes=3, dim=4, per_class=40, spread=0.3, q=None,
                     malicious=(), attack='none', alpha=0.01, local_epochs=1, batch_size=5,
                     seed=0, threads=1, dtype=np.float64):
    """Synthetic federation: (population, arch, validation, test)"""
    ds = synthetic_blobs(num_classes, dim, per_class, spread, seed)
    train, validation, test = split_80_10_10(ds, seed + 1)
    q = 1.0 / num_classes if q is None else q
    shards = partition_concentration(train, PartitionSpec(n_clients, q, num_classes, seed + 2))
    batches = [Batch(train.features[s.indices].astype(dtype), train.labels[s.indices]) for s in shards]
    arch = ModelArch('logistic', dim, num_classes)
    population = ClientPopulation(batches, arch, AttackSpec(kind=attack), set(malicious), alpha,
                                  local_epochs, batch_size, seed, threads=threads)
    return population, arch, validation, test


@pytest.fixture
def federation():
    return build_federation
