import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from surfel_avatar.rig import generate_rig_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_rig(tmp_path_factory):
    """A 2-view, 3-frame, 32x32 rig dataset; cheap enough for IO and trainer tests."""
    root = tmp_path_factory.mktemp("tiny_rig")
    generate_rig_dataset(root, n_views=2, n_frames=3, size=32, test_views=(1,))
    return root


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, name, ok, detail)``; asserts ``ok``."""
    def record(n, name, ok, detail):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _CRITERIA[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
