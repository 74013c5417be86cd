import numpy as np
import pytest

from sra.image import YUV420, Frame

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng, width, height, bit_depth=10, fmt=YUV420):
    top = (1 << bit_depth) - 1
    cy, cx = (height // 2, width // 2) if fmt == YUV420 else (height, width)
    return Frame(width, height, bit_depth, fmt, (
        rng.integers(0, top + 1, (height, width)),
        rng.integers(0, top + 1, (cy, cx)),
        rng.integers(0, top + 1, (cy, cx)),
    ))


@pytest.fixture
def make_frame(rng):
    return lambda w, h, bit_depth=10, fmt=YUV420: random_frame(rng, w, h, bit_depth, fmt)
