import numpy as np
import pytest

from tadml.autograd import Tensor
from tadml.gradsuite import probe  # noqa: F401  (shared with the test modules)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape))


# acceptance results, filled by test_acceptance and printed after the run
CRITERIA: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
