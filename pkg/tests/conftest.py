import dataclasses
import logging

import numpy as np
import pytest

from backend.scenario import ContactScenario, Indenter
from backend.simulator import SensorModel
from config.app_config import load_pipeline_config


@pytest.fixture(scope="session")
def cfg():
    return load_pipeline_config()


@pytest.fixture(scope="session")
def sensor(cfg):
    model = SensorModel.from_config(cfg)
    _ = model.surface, model.reference_dots
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def with_section():
    """cfg with one section replaced: with_section(cfg, "sim", noise_sigma=1.0)."""
    def _replace(cfg, section, **values):
        return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    return _replace


def press_scenario(frames=4, fz=3.0, hardness="hard", polar_deg=0.0, shape="sphere", radius=4.5):
    """Linear ramp of a normal press; depth follows Fz at 4 N/mm."""
    ramp = np.linspace(0.0, 1.0, frames)
    wrenches = np.zeros((frames, 6))
    wrenches[:, 2] = fz * ramp
    return ContactScenario(
        frames, wrenches, wrenches[:, 2] / 4.0,
        Indenter(shape=shape, radius=radius, polar_deg=polar_deg),
        hardness, name=f"press-{hardness}",
    )


@pytest.fixture
def restore_logging():
    root = logging.getLogger()
    handlers = list(root.handlers)
    level = root.level
    yield
    for h in list(root.handlers):
        if h not in handlers:
            h.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def press():
    return press_scenario
