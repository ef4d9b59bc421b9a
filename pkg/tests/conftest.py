import sys

import numpy as np
import pytest

from ifsdlab.core import BoundingBox, Instance, Scene, make_proposal
from ifsdlab.world import WorldConfig, generate_world


def make_scene(scene_id, specs, proposals=(), extent=100.0):
    """specs: list of (box tuple, class, feature list); proposals: list of box tuples."""
    insts = tuple(Instance(BoundingBox(*b), c, np.asarray(f, dtype=float)) for b, c, f in specs)
    props = tuple(make_proposal(BoundingBox(*b), insts) for b in proposals)
    return Scene(scene_id, insts, props, extent)


@pytest.fixture(scope="session")
def small_world():
    cfg = WorldConfig(num_base_classes=3, num_novel_classes=2, scenes_per_base_class=6, test_scenes=12,
                      d_world=8, seed=3)
    return generate_world(cfg)


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig(seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
