import numpy as np
import pytest

from steinpost import BaseKernelConfig, ChainOutput, SteinKernelConfig, gaussian_target


def unit_gaussian(d: int):
    return gaussian_target(np.zeros(d), np.eye(d))


def gaussian_chain(n: int, d: int, seed: int = 0) -> ChainOutput:
    """iid unit-Gaussian pseudo-chain with exact scores attached."""
    pts = np.random.default_rng(seed).standard_normal((n, d))
    return ChainOutput(states=pts, grads=-pts)


@pytest.fixture
def imq_config_1d():
    return SteinKernelConfig(base=BaseKernelConfig(), target=unit_gaussian(1))


@pytest.fixture
def imq_config_2d():
    return SteinKernelConfig(base=BaseKernelConfig(), target=unit_gaussian(2))
