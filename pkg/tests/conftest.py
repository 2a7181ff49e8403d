from pathlib import Path

import numpy as np
import pytest

from kppem.poisson import (PhantomSpec, PoissonDeblurModel, gaussian_blur_matrix,
                           random_instance, synthesize_data, two_rail_phantom)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_model(rng):
    """Random 4-pixel, 6-detector instance with positive counts."""
    return random_instance(rng, 4, 6)


@pytest.fixture(scope="session")
def deblur64():
    """The default 64-pixel noiseless two-rail instance and its truth."""
    truth = two_rail_phantom(PhantomSpec())
    P = gaussian_blur_matrix(64, 0.75)
    model = PoissonDeblurModel(P, synthesize_data(P, truth))
    return model, truth


@pytest.fixture
def deblur8():
    spec = PhantomSpec(p=8, rails=((2,), (5,)), rail_height=1.0, background=0.1)
    truth = two_rail_phantom(spec)
    P = gaussian_blur_matrix(8, 0.75)
    return PoissonDeblurModel(P, synthesize_data(P, truth)), truth


def interior_point(rng, p, low=0.5, high=3.0):
    return rng.uniform(low, high, size=p)


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Output directory of one ``run`` of the shipped default config."""
    from kppem.harness import cmd_run
    out = tmp_path_factory.mktemp("default-run")
    assert cmd_run(CONFIG_DIR / "default.yaml", out=str(out)) == 0
    return out
