import numpy as np
import pytest

from estan.tensor import float64_mode


@pytest.fixture
def f64():
    with float64_mode():
        yield


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
