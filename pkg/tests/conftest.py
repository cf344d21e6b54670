import numpy as np
import pytest

from vcp.clipdata import VideoTensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_video(rng, frames=40, size=8, channels=3, video_id="v", label=0):
    data = rng.integers(0, 256, size=(frames, size, size, channels), dtype=np.uint8)
    return VideoTensor(data, video_id, label)


@pytest.fixture
def make_video(rng):
    def factory(**kw):
        return random_video(rng, **kw)

    return factory


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """The default synthetic corpus (10 classes x 50 videos, seed 42)."""
    from vcp.clipdata import SyntheticSpec, generate_synthetic

    return generate_synthetic(SyntheticSpec(), tmp_path_factory.mktemp("corpus"))


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Callable recording one PASS/FAIL line per acceptance criterion."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        request.config.acceptance_lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
