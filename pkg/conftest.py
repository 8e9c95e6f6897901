"""
Shared pytest fixtures and the `slow` marker.

Slow tests (desk-scale reproductions) run only with GILAB_RUN_SLOW=1; the ones that
need MNIST or CIFAR-10 files also need GILAB_DATA_DIR.
"""

import os

import pytest
import torch

from models import ModelSpec, build_model
from privacy_modules import PrivacyModuleSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproduction, enabled with GILAB_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("GILAB_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set GILAB_RUN_SLOW=1 to run desk-scale reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def cnn_spec():
    """The three-layer CNN on 32x32x3 inputs"""
    return ModelSpec()


@pytest.fixture
def tiny_cnn_spec():
    """Two conv blocks on 1x12x12 inputs: 12 -> 5 -> 2"""
    return ModelSpec(input_shape=(1, 12, 12), num_classes=3, conv_channels=(2, 3), kernel_size=3, stride=2)


@pytest.fixture
def tiny_mlp_spec():
    return ModelSpec(
        family="mlp",
        input_shape=(1, 3, 3),
        num_classes=3,
        mlp_width=6,
        mlp_hidden_layers=2,
        batch_norm=False,
        dense_bias=True,
    )


@pytest.fixture
def tiny_precode_mlp_spec(tiny_mlp_spec):
    return tiny_mlp_spec.model_copy(update={"privacy": (PrivacyModuleSpec(kind="precode", position=1, bottleneck_size=2),)})


@pytest.fixture
def cnn_model(cnn_spec):
    return build_model(cnn_spec, seed=0)


@pytest.fixture
def image():
    generator = torch.Generator().manual_seed(7)
    return torch.rand((3, 32, 32), generator=generator)
