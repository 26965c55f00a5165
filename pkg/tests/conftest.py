import numpy as np
import pytest

from prm import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op_grads(build, arrays, tol=1e-6, h=1e-6):
    """``build(*nodes)`` returns a Node; compare its backward pass with finite differences.

    The scalar is ``sum(out * R)`` for a fixed random ``R`` so every output entry matters.
    """
    nodes = [ad.parameter(a) for a in arrays]
    out = build(*nodes)
    R = np.random.default_rng(123).normal(size=out.shape)
    loss = ad.sum_all(ad.mul(out, ad.constant(R)))
    ad.backward(loss)
    for k, n in enumerate(nodes):
        def f():
            fresh = [ad.constant(a) for a in arrays]
            return float((build(*fresh).value * R).sum())
        num = numeric_grad(f, arrays[k], h)
        np.testing.assert_allclose(n.grad, num, rtol=tol, atol=tol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
