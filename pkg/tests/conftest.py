import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from terracost.envmodel import Environment, GeoTransform, Raster, RasterKind

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=15, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_env(height, classes, ortho=None, resolution=0.05, origin=None, num_classes=7, traversable=(4, 5, 6, 7)):
    """Environment from plain arrays; row 0 is north, origin at the NW cell centre."""
    height = np.asarray(height, dtype=np.float32)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.float32), height.shape)
    ortho = np.full(height.shape, 0.5, np.float32) if ortho is None else np.asarray(ortho, np.float32)
    if origin is None:
        origin = (0.0, (height.shape[0] - 1) * resolution)
    geo = GeoTransform(origin[0], origin[1], resolution)
    return Environment(
        Raster(geo, RasterKind.ORTHO, ortho),
        Raster(geo, RasterKind.HEIGHT, height),
        Raster(geo, RasterKind.CLASS, np.array(classes)),
        num_classes,
        frozenset(traversable),
    )


def ramp_env(n=121, slope_deg=10.0, axis="x", label=6, resolution=0.05):
    """Planar ramp rising toward +x (east) or +y (north)."""
    g = np.tan(np.radians(slope_deg)) * resolution
    idx = np.arange(n, dtype=np.float64)
    if axis == "x":
        h = 600.0 + np.tile(idx * g, (n, 1))
    else:
        h = 600.0 + np.tile(((n - 1) - idx)[:, None] * g, (1, n))
    return make_env(h, label, resolution=resolution)


@pytest.fixture
def flat_env():
    return make_env(np.full((121, 121), 600.0), 6)


@pytest.fixture(scope="session")
def small_synth_env():
    from terracost.synthgen import generate_environment

    return generate_environment(12, 12, seed=3)


# -- acceptance summary -------------------------------------------------------------------------

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
