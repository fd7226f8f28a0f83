import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

# one line per acceptance criterion, echoed after the run so the verdicts
# survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    """Small synthetic IDX dataset shared by CLI-level tests."""
    from datagen import write_dataset

    return write_dataset(tmp_path_factory.mktemp("idx"),
                         n_train=1500, n_test=400, seed=11)
