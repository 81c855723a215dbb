from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset():
    """Separable 3-task dataset small enough for fast training tests."""
    from embercl.data import EmbeddingDataset, SyntheticSpec, gen_synthetic

    spec = SyntheticSpec(
        tasks=3,
        classes_per_task=2,
        dim_img=24,
        dim_txt=24,
        cluster_separation=10.0,
        train_per_class=60,
        test_per_class=30,
        seed=99,
    )
    records, manifest = gen_synthetic(spec)
    return EmbeddingDataset(records, manifest)
