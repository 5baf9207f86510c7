import numpy as np
import pytest

from causalpix import tensor as T


def numeric_grad(f, arrays, h=1e-4):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def autodiff_grad(fn, arrays):
    """Gradients of scalar Tensor ``fn(*tensors)`` via the tape."""
    ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*ts)
    return T.backward(tape, out, ts)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


def gradcheck(fn, arrays, h=1e-4):
    """Largest relative error between autodiff and central differences."""
    def scalar(*xs):
        return float(fn(*[T.Tensor(x) for x in xs]).data)

    ad = autodiff_grad(fn, arrays)
    fd = numeric_grad(scalar, arrays, h)
    return max(rel_err(a, n) for a, n in zip(ad, fd))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, title, detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})")
