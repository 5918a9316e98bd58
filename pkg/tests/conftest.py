import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twinforge.cli import REFERENCE_CHECKPOINT, REFERENCE_SCENE, packaged  # noqa: E402
from twinforge.world import load_scene  # noqa: E402

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def reference_scene():
    return load_scene(packaged(REFERENCE_SCENE))


@pytest.fixture(scope="session")
def reference_checkpoint_path():
    return packaged(REFERENCE_CHECKPOINT)
