import os

# single-threaded BLAS so bit-identity checks are meaningful
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from homocl import synthdata


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    spec = synthdata.SynthesisSpec(4, 8, 3, 96, 0.1, 1, seed=3)
    return synthdata.generate_dataset(spec, synthdata.uniform(4))


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, passed, detail)."""
    def record(n, passed, detail):
        ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
