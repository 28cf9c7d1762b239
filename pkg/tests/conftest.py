from __future__ import annotations

import numpy as np
import pytest

from fedvg.nn import LayeredParams, cross_entropy, forward


def central_differences(params: LayeredParams, x, y, topology, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of mean cross-entropy, one coordinate at a time."""
    flat = params.flat()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        f_up = cross_entropy(forward(params.with_flat(up), x, topology), y)
        f_down = cross_entropy(forward(params.with_flat(down), x, topology), y)
        out[i] = (f_up - f_down) / (2 * h)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.abs(a - b)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    rel[diff <= floor] = 0.0
    return float(rel.max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
