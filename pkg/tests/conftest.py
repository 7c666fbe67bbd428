import numpy as np
import pytest

from beamscene.scene import Building, BuildingSpec, Environment, default_layout


def boxes_env(boxes, seed=0):
    """Environment from raw ``(lo, hi)`` corner pairs; SA bookkeeping is irrelevant here."""
    layout = default_layout()
    buildings = []
    for k, (lo, hi) in enumerate(boxes):
        size = np.asarray(hi, float) - np.asarray(lo, float)
        spec = BuildingSpec(f"T{k}", *map(float, size))
        buildings.append(Building(spec, tuple(map(float, lo)), 1 + k % 8))
    return Environment(layout, tuple(buildings), seed)


@pytest.fixture
def make_env():
    return boxes_env


# acceptance criteria report their status here and get echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
