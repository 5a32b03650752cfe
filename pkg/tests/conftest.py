"""Shared fixtures: a small simulated sequence and a tiny network, reused
across test modules to keep the suite fast."""

import numpy as np
import pytest

from evrec import nn, trainer
from evrec.simulator import SimConfig, Trajectory, simulate_sequence

DESK_NET = nn.NetworkConfig(num_encoders=2, num_residual=1, base_channels=4,
                            input_bins=5, unroll_len=8)


@pytest.fixture(scope="session")
def desk_sequence():
    """64x64, 0.5 s simulated sequence with lively motion (~16k events)."""
    cfg = SimConfig(width=64, height=64, duration=0.5, f_gt=50, f_sim=1000,
                    seed=10, motion_scale=1.5)
    return simulate_sequence(cfg)


@pytest.fixture(scope="session")
def desk_data(desk_sequence):
    return trainer.prepare_sequence(desk_sequence, events_per_window=1000, bins=5)


@pytest.fixture(scope="session")
def tiny_weights():
    return nn.init_weights(DESK_NET, np.random.default_rng(42))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def static_sequence():
    cfg = SimConfig(width=32, height=32, duration=0.2, f_gt=50, f_sim=500, seed=3)
    return simulate_sequence(cfg, trajectory=Trajectory.static(cfg.duration))
