import numpy as np
import pytest

from docmm import tensor as T


def finite_difference(fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``array`` (edited in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + eps
        up = fn()
        array[idx] = old - eps
        down = fn()
        array[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def check_grads(build, inputs: list[np.ndarray], atol: float = 1e-6, rtol: float = 1e-5) -> None:
    """``build(*tensors)`` returns a scalar Tensor; analytic grads must match finite differences."""
    with T.default_dtype(np.float64):
        tensors = [T.Tensor(x, requires_grad=True) for x in inputs]
        build(*tensors).backward()

        def value():
            return build(*[T.Tensor(t.data) for t in tensors]).item()

        for t in tensors:
            numeric = finite_difference(value, t.data)
            np.testing.assert_allclose(t.grad, numeric, atol=atol, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
