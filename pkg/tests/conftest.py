import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(criterion, passed, detail)``; printed in the terminal summary."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def block_counts(sizes_r, sizes_c, rates, rng=None):
    """Area x patient counts with planted blocks; returns (counts, row_labels, col_labels).

    ``rates`` is an r x c matrix of cell values (Poisson means when ``rng`` is
    given, exact counts otherwise).
    """
    rl = np.repeat(np.arange(len(sizes_r)), sizes_r)
    cl = np.repeat(np.arange(len(sizes_c)), sizes_c)
    lam = np.asarray(rates, dtype=float)[rl[:, None], cl[None, :]]
    counts = rng.poisson(lam) if rng is not None else lam.astype(np.int64)
    return counts, rl, cl
