"""
Shared seeded fixtures: a default-size toy model, planted scenes, and
profiles at each pipeline stage.
"""
import numpy as np
import pytest

from core.habi import CalibrationKnobs, calibrate
from core.head_metrics import rank_heads
from core.toy_lvlm import CaptureFixtureSpec, ModelConfig, SceneParams, init_model, make_scenes

SALIENT_FRACTION = 0.75


@pytest.fixture(scope="session")
def model():
    return init_model(ModelConfig(seed=0))


@pytest.fixture(scope="session")
def scenes(model):
    return make_scenes(model, SceneParams(), seed=1, n_scenes=20)


@pytest.fixture(scope="session")
def battery(model):
    """50-scene evaluation battery, disjoint from the calibration scenes."""
    return make_scenes(model, SceneParams(), seed=2, n_scenes=50)


@pytest.fixture(scope="session")
def profile(model, scenes):
    return calibrate(scenes, model, CalibrationKnobs(salient_fraction=SALIENT_FRACTION, seed=1))


@pytest.fixture(scope="session")
def ranked(model, scenes, profile):
    updated, _ = rank_heads(scenes, model, profile, k=8)
    return updated


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def query_fixture(rows, n_vision, n_prompt, **kwargs):
    """Fixture from (L, H, S) query rows, one array per step."""
    return CaptureFixtureSpec(
        n_vision=n_vision,
        n_prompt=n_prompt,
        query_rows=[np.asarray(r, dtype=float) for r in rows],
        **kwargs,
    )
