import os

import hypothesis
import numpy as np
import pytest

from app.models.graph import LayerSpec, init_graph
from app.models.schemas import TaskSpec
from app.tasks.datasets import make_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


def small_cnn(outputs: int = 3):
    """8x8 single-channel input, one batchnorm, dense head."""
    return [
        LayerSpec.conv(8, 1, 3, padding=1),
        LayerSpec.batchnorm(8),
        LayerSpec.relu(),
        LayerSpec.maxpool(),
        LayerSpec.conv(16, 8, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.avgpool_global(),
        LayerSpec.dense(outputs, 16),
    ]


def plain_cnn(outputs: int = 3):
    """Same shape as small_cnn without batchnorm."""
    return [
        LayerSpec.conv(4, 1, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.conv(5, 4, 3, padding=1),
        LayerSpec.relu(),
        LayerSpec.avgpool_global(),
        LayerSpec.dense(outputs, 5),
    ]


def tiny_task(pattern: str = "blobs", classes: int = 3, seed: int = 0, **kwargs) -> TaskSpec:
    fields = dict(kind="classification", pattern=pattern, seed=seed, height=8, width=8, classes=classes,
                  train_size=64, test_size=32)
    fields.update(kwargs)
    return TaskSpec(**fields)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph(rng):
    graph = init_graph(small_cnn(), rng)
    # non-trivial batchnorm state
    graph.view(1, "gamma")[...] = rng.uniform(0.5, 1.5, 8)
    graph.view(1, "beta")[...] = rng.normal(0.0, 0.1, 8)
    graph.view(1, "running_mean")[...] = rng.normal(0.0, 0.2, 8)
    graph.view(1, "running_var")[...] = rng.uniform(0.5, 2.0, 8)
    return graph


@pytest.fixture
def plain_graph(rng):
    graph = init_graph(plain_cnn(), rng)
    for i in graph.weighted_layers():
        graph.view(i, "bias")[...] = rng.normal(0.0, 0.1, graph.layers[i].out_units)
    return graph


@pytest.fixture(scope="session")
def blobs_data():
    return make_dataset(tiny_task("blobs", classes=3, seed=3))


@pytest.fixture(scope="session")
def textures_data():
    return make_dataset(tiny_task("textures", classes=4, seed=5))
