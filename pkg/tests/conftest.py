import os

# single-threaded BLAS keeps reductions in a fixed order (bit-exact reruns)
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
