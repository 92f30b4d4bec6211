import pytest

from privgps.geo import GeoPoint, GridSpec


class FixedDraws:
    """Stand-in RandomSource that replays a scripted list of uniforms."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.used = 0

    def uniform(self):
        v = self.draws[self.used]
        self.used += 1
        return v


@pytest.fixture
def grid3():
    return GridSpec(GeoPoint(0.0, 0.0), 1000.0, 3, 3)


@pytest.fixture
def la_grid():
    return GridSpec(GeoPoint(34.05, -118.45), 1000.0, 3, 3)
