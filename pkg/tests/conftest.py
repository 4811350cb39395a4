import numpy as np
import pytest
import torch

from selfpath.datagen import SlideParams, generate_slide


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_slide():
    return generate_slide(SlideParams(width=256, height=256), seed=7, slide_id="t0")


@pytest.fixture(scope="session")
def slide_set():
    params = SlideParams(width=320, height=320)
    return [generate_slide(params, seed=100 + i, slide_id=f"s{i}") for i in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def report(number: int, title: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}" + (f": {detail}" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
