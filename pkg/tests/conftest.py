"""Shared fixtures: one tiny dataset and one tiny trained run per session."""

import numpy as np
import pytest

from fisheyex.networks import (
    CriticConfig,
    GeneratorConfig,
    PerceptionConfig,
    RevisionConfig,
)
from fisheyex.pipeline import TrainConfig, build_dataset, train_stage1, train_stage2
from fisheyex.polar import PolarGrid


def tiny_grid(h=64, w=64, n_rho=16, n_theta=64):
    xc, yc = (w - 1) / 2.0, (h - 1) / 2.0
    return PolarGrid(center=(xc, yc), rho_max=float(np.hypot(xc, yc)),
                     n_rho=n_rho, n_theta=n_theta)


def tiny_train_config(**overrides):
    base = dict(
        stage=1,
        iters=12,
        batch=2,
        seed=3,
        adversarial=False,
        generator=GeneratorConfig(base_channels=4, dilation_rates=(2, 4)),
        perception=PerceptionConfig(channels=(4, 8, 8, 8), hidden=32),
        revision=RevisionConfig(base_channels=4, bottleneck_channels=8, residual_blocks=2),
        critic=CriticConfig(base_channels=4),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    return build_dataset(root, 10, 7, height=64, width=64, grid=tiny_grid())


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, dataset):
    """A stage-1 + stage-2 run directory usable for inference tests."""
    out = tmp_path_factory.mktemp("run")
    train_stage1(dataset, tiny_train_config(), out)
    train_stage2(dataset, tiny_train_config(stage=2, iters=8), out, out)
    return out
