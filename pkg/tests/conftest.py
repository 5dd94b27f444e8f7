import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------
# test_acceptance.py records one verdict per criterion; the terminal summary prints
# them as a block of PASS/FAIL lines so they land in saved test output.

_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance(request):
    criterion = request.node.get_closest_marker("criterion").args[0]
    state = {}

    def record(ok: bool, detail: str):
        state["done"] = True
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        assert ok, f"criterion {criterion}: {detail}"

    yield record
    if not state:
        _ACCEPTANCE[criterion] = (False, "raised before a verdict was reached")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
