import numpy as np
import pytest
import torch

from mtse import autodiff


@pytest.fixture
def f64():
    """Run the test body in 64-bit verification mode."""
    prev = torch.get_default_dtype()
    autodiff.set_precision(True)
    yield torch.float64
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Records one verdict line per acceptance criterion and fails the test on a miss."""

    def verdict(criterion: str, ok: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
