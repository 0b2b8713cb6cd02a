import numpy as np
import pytest

from surfelnbv.camera import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def intr8():
    return CameraIntrinsics(resolution=(8, 8))


@pytest.fixture
def intr32():
    return CameraIntrinsics(resolution=(32, 32))


_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_RESULTS, [])

    def report(number: int, ok: bool, detail: str) -> bool:
        lines.append((number, f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {detail}"))
        print(lines[-1][1])
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
