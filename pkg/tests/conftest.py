import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_test_scene(seed=0):
    """Small deterministic scene used across test modules."""
    from gbx.render.brdf import MaterialParams
    from gbx.render.scene import Box, Camera, Light, Plane, Scene, Sphere

    floor = Plane((0, 0, 0), (0, 1, 0), MaterialParams((0.6, 0.6, 0.6), 0.8, 0.0))
    ball = Sphere((0, 0.6, 0), 0.6, MaterialParams((0.8, 0.2, 0.2), 0.5, 0.0))
    cube = Box((1.0, 0.35, -0.4), (0.35, 0.35, 0.35), MaterialParams((0.2, 0.3, 0.9), 0.2, 1.0))
    cam = Camera((0, 2.2, 4.0), (0, 0.5, 0), 45.0)
    lights = (Light.directional((-1, 1.2, 0.3), (3.0, 3.0, 3.0)),)
    return Scene((floor, ball, cube), lights, cam, seed=seed)
