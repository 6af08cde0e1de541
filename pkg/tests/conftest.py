import pytest
import torch

from lemul.data import SyntheticSpec, generate_synthetic
from lemul.render import CameraIntrinsics


@pytest.fixture
def cam64():
    return CameraIntrinsics()


@pytest.fixture
def cam8():
    return CameraIntrinsics(10.0, 8, (0.9, 1.1))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three synthetic instances with three views each."""
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticSpec(count=3, seed=5, views_per_instance=3), root)
    return root


@pytest.fixture(autouse=True)
def _default_dtype():
    torch.set_default_dtype(torch.float32)
    yield


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``record(criterion, passed, detail)`` prints one line and keeps it for the summary."""

    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
