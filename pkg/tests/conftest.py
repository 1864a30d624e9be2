import numpy as np
import pytest

from fedminmax.data import (
    GroupedDataset,
    PartitionPlan,
    PartitionSetting,
    SyntheticSpec,
    generate_synthetic,
    partition,
)
from fedminmax.model import MlpSpec
from fedminmax.schema import AlgorithmConfig


@pytest.fixture
def synthetic() -> GroupedDataset:
    return generate_synthetic(SyntheticSpec(n_samples=2000, seed=7))


@pytest.fixture
def esg_shards(synthetic):
    return partition(synthetic, PartitionPlan(PartitionSetting.ESG, num_clients=4, seed=3))


@pytest.fixture
def ssg_shards(synthetic):
    return partition(synthetic, PartitionPlan(PartitionSetting.SSG, num_clients=4, seed=3))


@pytest.fixture
def small_spec() -> MlpSpec:
    return MlpSpec.build(1, [8], 2, "tanh")


@pytest.fixture
def make_cfg():
    def _make(name="fedminmax", **kwargs) -> AlgorithmConfig:
        kwargs.setdefault("rounds", 20)
        return AlgorithmConfig(name=name, **kwargs)

    return _make


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def random_dataset():
    """Factory for small datasets where every group is present."""

    def _make(rng, n=60, num_features=3, num_groups=3, num_classes=3) -> GroupedDataset:
        groups = np.concatenate([np.arange(num_groups), rng.integers(0, num_groups, n - num_groups)])
        return GroupedDataset(
            rng.standard_normal((n, num_features)),
            rng.integers(0, num_classes, n),
            groups,
            num_groups,
            num_classes,
        )

    return _make
