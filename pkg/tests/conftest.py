import numpy as np
import pytest

from mosaicflow import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def check_grads(build, inputs: list[np.ndarray], tol: float = FD_TOL) -> float:
    """Compare tape gradients of ``build(*nodes)`` with finite differences.

    Returns the worst relative error over all inputs.
    """
    nodes = [T.tensor(x, requires_grad=True) for x in inputs]
    loss = build(*nodes)
    grads = T.backward(loss, nodes)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [T.constant(a) for a in inputs]
            args[i] = T.constant(v)
            return float(build(*args).value)

        err = rel_err(grads[nodes[i]], numeric_grad(f, x))
        worst = max(worst, err)
    assert worst <= tol, f"relative gradient error {worst:.3e} exceeds {tol:.0e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary

ACCEPTANCE: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Collect notes for a criterion and log one PASS/FAIL line at teardown."""
    notes: list[str] = []
    yield notes
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    label = request.node.get_closest_marker("criterion").args[0]
    line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f" | {'; '.join(notes)}" if notes else "")
    ACCEPTANCE.append(line)
    print(line)
