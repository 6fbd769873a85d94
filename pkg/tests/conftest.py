import numpy as np
import pytest

from adakner.lattice import Lattice


def random_lattice(rng, n, L, scale=2.0):
    return Lattice(
        rng.normal(0, scale, (n, L)),
        rng.normal(0, scale, (L, L)),
        rng.normal(0, scale, L),
        rng.normal(0, scale, L),
    )


def random_mask(rng, n, L, p_annotated=0.3, p_keep=0.6):
    """Rows are either singletons (annotated) or random non-empty subsets."""
    mask = np.zeros((n, L), dtype=bool)
    for t in range(n):
        if rng.random() < p_annotated:
            mask[t, rng.integers(L)] = True
        else:
            row = rng.random(L) < p_keep
            row[rng.integers(L)] = True
            mask[t] = row
    return mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
