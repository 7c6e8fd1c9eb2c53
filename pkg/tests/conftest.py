import numpy as np
import pytest


def random_case(seed, max_side=32, min_side=16, k=4):
    """Seeded random image with a random k-label map (blocky, so clusters have neighbours)."""
    rng = np.random.default_rng(seed)
    rows, cols = rng.integers(min_side, max_side + 1, size=2)
    img = rng.gamma(2.0, 1.0, size=(rows, cols)) * rng.uniform(0.5, 50.0)
    coarse = rng.integers(1, k + 1, size=(rows // 3 + 1, cols // 3 + 1))
    labels = np.kron(coarse, np.ones((3, 3), dtype=int))[:rows, :cols]
    flip = rng.random((rows, cols)) < 0.15
    labels[flip] = rng.integers(1, k + 1, size=flip.sum())
    return img, labels.astype(np.int32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
