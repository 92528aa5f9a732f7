import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advreg import autodiff as ad

settings.register_profile("advreg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("advreg")


def evaluate(fn, arrays):
    """Build ``fn`` on fresh leaves named a0, a1, ... and return (graph, leaves, root)."""
    g = ad.Graph()
    leaves = [g.leaf(a, f"a{i}") for i, a in enumerate(arrays)]
    return g, leaves, fn(*leaves)


def central_fd(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        of[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(fn, arrays, h=1e-5):
    """Largest relative error between reverse-mode and finite-difference gradients over all inputs."""
    _, leaves, root = evaluate(fn, arrays)
    grads = ad.grad(root, leaves)
    worst = 0.0
    for i, a in enumerate(arrays):

        def f(v, i=i):
            vals = list(arrays)
            vals[i] = v
            return float(evaluate(fn, vals)[2].value)

        worst = max(worst, rel_err(grads[f"a{i}"], central_fd(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
