"""Shared fixtures: analytic test fields and session-scoped trained models."""

import numpy as np
import pytest

from sliceflow import flow_training as ft
from sliceflow import potentials as pot
from sliceflow import transport as tr


class TimeCurvedField(tr.VelocityField):
    """u(t, x) = rate * t * x with exact map z -> z * exp(rate/2).

    The trajectories are curved in t, so unlike the straight-line affine
    fixture the fixed-step schemes show their true orders, and coarse
    discretizations produce genuinely biased transport maps.
    """

    kind = "analytic-affine"

    def __init__(self, rate, dimension):
        self.rate = rate
        self.dimension = dimension

    def __call__(self, t, x):
        return self.rate * t * x

    def exact_map(self, z):
        return np.asarray(z, dtype=float) * np.exp(self.rate / 2.0)


MOONS_NOISE = 0.15
MOONS_DATA_SEED = 42

# conditional problem shared by the sampling tests: observe the second data
# coordinate near the gap between the moons so both branches carry mass
MOONS_OBSERVED_VALUE = 0.25
MOONS_OBSERVATION_SCALE = 0.25


@pytest.fixture(scope="session")
def moons_dataset():
    return ft.sample_two_moons(20_000, MOONS_NOISE, MOONS_DATA_SEED)


@pytest.fixture(scope="session")
def fast_moons_model(moons_dataset):
    """Small prior for evaluation-heavy sampling tests (~2 s to train)."""
    cfg = ft.TrainConfig(
        hidden_sizes=(32, 32), batch_size=192, iterations=8000, learning_rate=1.5e-3, seed=11
    )
    return ft.train(moons_dataset, cfg).field


@pytest.fixture(scope="session")
def quality_moons_model(moons_dataset):
    """Deeper prior whose pushforward closely matches the dataset (~45 s)."""
    cfg = ft.TrainConfig(
        hidden_sizes=(64, 64, 64), batch_size=512, iterations=40_000, learning_rate=1e-3, seed=12
    )
    return ft.train(moons_dataset, cfg).field


def moons_conditional(model, steps=10, scheme="rk4"):
    tmap = tr.TransportMap(model, scheme, steps)
    p = pot.gaussian_observation(
        y=np.array([MOONS_OBSERVED_VALUE]),
        sigma_y=MOONS_OBSERVATION_SCALE,
        operator=pot.CoordinateProjection([1]),
    )
    return pot.PullbackPotential(p, tmap)


@pytest.fixture(scope="session")
def fast_moons_conditional(fast_moons_model):
    return moons_conditional(fast_moons_model)


@pytest.fixture(scope="session")
def quality_moons_conditional(quality_moons_model):
    return moons_conditional(quality_moons_model)


@pytest.fixture(scope="session")
def quality_model_file(quality_moons_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "two_moons_quality.efvf"
    tr.save_field(quality_moons_model, path)
    return path
