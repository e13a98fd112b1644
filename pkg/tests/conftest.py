import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from nestseg.data import SyntheticConfig, generate_synthetic


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    # the determinism contracts are stated for one BLAS thread
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 synthetic 32x32 samples (depth-3 friendly), split 17/4/3."""
    root = tmp_path_factory.mktemp("small")
    cfg = SyntheticConfig(seed=3, count=24, image_size=(32, 32), depth=3, noise=0.03)
    return generate_synthetic(cfg, root)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion("A1", ok, detail)`` records one pass/fail line for the summary."""
    def record(name, ok, detail=""):
        line = f"{name} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
