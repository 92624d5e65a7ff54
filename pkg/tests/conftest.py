import numpy as np
import pytest
import torch

from propalign.hand_model import make_toy_hand
from propalign.synth_data import generate_dataset

torch.set_num_threads(1)

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def spec():
    return make_toy_hand(0)


@pytest.fixture(scope="session")
def small_dataset(spec):
    return generate_dataset(4, 16, spec, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_log(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str) -> None:
        lines[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter):
    lines = terminalreporter.config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])
