"""Shared fixtures: tiny deterministic datasets and torch thread pinning."""

import numpy as np
import pytest
import torch

from dira.datasets import PhantomParams, build_dataset

# keep CPU math deterministic and polite on shared machines
torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 phantoms, enough for split/loader/training smoke tests."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    manifest = build_dataset(123, 24, PhantomParams(), root)
    return root, manifest


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
