"""Shared fixtures: toy linear classifiers and a cached desk-scale zoo.

Set ADVOPT_TEST_CACHE to a directory to persist trained defenses between
pytest runs (delete it to force retraining); otherwise a per-session tmp
directory is used.
"""

import os

import pytest
import torch
from torch import nn

from advopt.core import Classifier
from advopt.defense_zoo import build_pool, default_recipes, load_dataset


def make_linear_classifier(weight, bias=None, name="linear", dtype=None) -> Classifier:
    """Classifier wrapping logits = W x + b over flattened inputs."""
    weight = torch.as_tensor(weight)
    if dtype is None:
        dtype = weight.dtype if weight.is_floating_point() else torch.get_default_dtype()
    weight = weight.to(dtype)
    k, d = weight.shape
    lin = nn.Linear(d, k, bias=True, dtype=dtype)
    with torch.no_grad():
        lin.weight.copy_(weight)
        lin.bias.copy_(torch.zeros(k, dtype=dtype) if bias is None
                       else torch.as_tensor(bias, dtype=dtype))
    module = nn.Sequential(nn.Flatten(), lin)
    return Classifier(module, name=name, num_classes=k, architecture="linear")


def random_linear_classifier(d, k=2, seed=0, scale=1.0, name="linear"):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(k, d, generator=gen) * scale
    b = torch.randn(k, generator=gen) * 0.1
    return make_linear_classifier(w, b, name=name)


@pytest.fixture(scope="session")
def digits_dataset():
    return load_dataset("digits")


@pytest.fixture(scope="session")
def zoo_cache_dir(tmp_path_factory):
    env = os.environ.get("ADVOPT_TEST_CACHE")
    if env:
        os.makedirs(env, exist_ok=True)
        return env
    return str(tmp_path_factory.mktemp("zoo"))


@pytest.fixture(scope="session")
def defense_pool(digits_dataset, zoo_cache_dir):
    """The five default desk-scale defenses, cached on disk."""
    return build_pool(default_recipes(), digits_dataset, zoo_cache_dir)


@pytest.fixture(scope="session")
def pool_manifest(defense_pool, zoo_cache_dir):
    return os.path.join(zoo_cache_dir, "pool.json")
