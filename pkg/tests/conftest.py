import numpy as np
import pytest

from budgetprune.architecture import Architecture, LayerSpec
from budgetprune.model import build_from_descriptor


def tiny_arch() -> Architecture:
    """Two masked convs (C=3 and C=4), a residual add and a pool on 3x8x8 inputs."""
    return Architecture((3, 8, 8), [
        LayerSpec("conv", 3, 4, 3, 1, 1, masked=True), LayerSpec("bn"), LayerSpec("relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv", 4, 4, 3, 1, 1, masked=True), LayerSpec("bn"), LayerSpec("add", source=3),
        LayerSpec("relu"), LayerSpec("gap"),
    ], name="tiny")


def randomize(model, seed=0, off_fraction=0.4):
    """Give every domain random switches, BN statistics and affine parameters."""
    gen = np.random.default_rng(seed)
    for d in model.domains.values():
        for s in d.switches.values():
            s.data[:] = np.where(gen.uniform(size=s.size) < off_fraction, -1e-3, 1e-3) * gen.uniform(0.5, 2, s.size)
        for bn in d.bn.values():
            bn.gamma.data[:] = gen.uniform(0.5, 1.5, bn.gamma.size).astype(np.float32)
            bn.shift.data[:] = gen.normal(size=bn.shift.size).astype(np.float32)
            bn.running_mean[:] = gen.normal(size=bn.running_mean.size).astype(np.float32)
            bn.running_var[:] = gen.uniform(0.5, 2.0, bn.running_var.size).astype(np.float32)
    return model


@pytest.fixture
def tiny_model():
    return build_from_descriptor(tiny_arch(), [("a", 3), ("b", 2), ("c", 4)], seed=3)


@pytest.fixture
def batch():
    return np.random.default_rng(42).uniform(0, 1, size=(5, 3, 8, 8))
