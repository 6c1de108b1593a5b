# -*- coding: UTF-8 -*-

import os
import sys

import pytest
import torch

# Add src to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from utils import tensor_ops  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hundred-step training runs")


@pytest.fixture(autouse=True)
def float64():
    """Every test runs in 64-bit unless it switches precision itself."""
    previous = tensor_ops.get_precision()
    tensor_ops.set_precision(64)
    torch.manual_seed(0)
    yield
    tensor_ops.set_precision(previous)


@pytest.fixture
def tiny_cfg():
    from models.ViT import ViTConfig

    return ViTConfig(image_size=8, patch_size=4, channels=3, d_model=16, depth=2, n_heads=4, n_kv_heads=2, num_classes=3)
