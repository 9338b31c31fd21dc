import numpy as np
import pytest

from flowlab import numerics as nx
from flowlab.numerics import Tensor


class AffineToy:
    """Two-parameter field ``w0 * x + w1``; enough to check loss gradients."""

    def __init__(self, w0=0.3, w1=-0.2):
        self.w0 = Tensor(w0, requires_grad=True)
        self.w1 = Tensor(w1, requires_grad=True)

    def parameters(self):
        return [self.w0, self.w1]

    def forward(self, x, t, cond=None):
        return nx.add(nx.mul(nx.as_tensor(x), self.w0), self.w1)


class ArrayField:
    """Wraps a numpy function ``f(x, t)`` as a gradient-free model."""

    def __init__(self, f):
        self.f = f

    def __call__(self, x, t, cond=None):
        return self.f(np.asarray(x), t)


@pytest.fixture
def affine_toy():
    return AffineToy()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(criterion, passed, detail)``; summarised after the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(name, passed, detail):
        lines[name] = (bool(passed), detail)
        print(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(lines, key=lambda n: int(n[2:])):
        passed, detail = lines[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}  {detail}")
