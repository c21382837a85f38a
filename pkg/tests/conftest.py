"""Shared fixtures and numerical oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from slap import diffcore as dc
from slap.data import SynthSpec, generate


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
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


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_gradient(op, inputs, seed, h=1e-6):
    """Return the worst relative error between tape gradients and central
    differences of ``sum(op(*inputs) * w)`` over every input."""
    # the weighting uses its own stream so it never coincides with an input
    rng = np.random.default_rng([seed, 99])
    with dc.use_tape():
        params = [dc.parameter(x) for x in inputs]
        out = op(*params)
        w = rng.normal(size=out.shape)
        loss = dc.tsum(out * w)
        grads = dc.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            vals = [dc.Tensor(xk if j == k else inputs[j]) for j in range(len(inputs))]
            with dc.no_grad():
                return float(np.sum(op(*vals).data * w))

        worst = max(worst, rel_error(grads[params[k]], numeric_grad(f, x, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(n_pairs=64, latent_dim=4, input_dim_a=12, input_dim_t=10, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate(small_spec)


@pytest.fixture(autouse=True)
def _fresh_tape():
    """Each test starts on a new default tape in 64-bit mode."""
    with dc.use_tape(), dc.default_dtype("float64"):
        yield


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one pass/fail line."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash[ACCEPTANCE_LINES].append((number, line))
        print(line)
        return ok

    return record
