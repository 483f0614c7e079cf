import numpy as np
import pytest

from shedlab.engine import BatchNorm, Conv2d, Dense, Flatten, NetworkSpec, ReLU

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def mlp(sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetworkSpec((sizes[0],), layers)


def small_convnet():
    return NetworkSpec(
        (3, 6, 6),
        [Conv2d(3, 6, 3, 3, 1, 1), BatchNorm(6), ReLU(), Conv2d(6, 4, 3, 3, 2, 0), ReLU(), Flatten(),
         Dense(16, 5), BatchNorm(5), ReLU(), Dense(5, 3)],
    )


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out
