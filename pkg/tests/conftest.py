import numpy as np
import pytest

from idmlab import autodiff as ad


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + eps
            hi = f(*arrays)
            arr[i] = old - eps
            lo = f(*arrays)
            arr[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def gradcheck(op, arrays, rng, eps=1e-6):
    """Max relative error between tape gradients and central differences.

    The output is contracted with a fixed random tensor so every output
    element contributes to the scalar being differentiated.
    """
    out_shape = op(*[ad.Tensor(a) for a in arrays]).shape
    proj = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float((op(*[ad.Tensor(a) for a in arrs]).data * proj).sum())

    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    op(*ts).backward(proj)
    numeric = numeric_grad(scalar, [a.copy() for a in arrays], eps)
    return max(rel_error(t.grad if t.grad is not None else np.zeros_like(t.data), n) for t, n in zip(ts, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
