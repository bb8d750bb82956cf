import numpy as np
import pytest

from multipar.tensor import no_grad


def numeric_grad(fn, arr, eps=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. the ndarray ``arr`` (mutated in place).

    With ``indices`` (flat positions) only those entries are filled in.
    """
    out = np.zeros_like(arr)
    flat, oflat = arr.reshape(-1), out.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if indices is None else indices):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            oflat[i] = (up - down) / (2 * eps)
    return out


def assert_grads_match(fn, tensors, rtol=1e-4, atol=1e-6):
    for t in tensors:
        t.grad = None
    fn().backward()
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        np.testing.assert_allclose(analytic, numeric_grad(fn, t.data), rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
