import numpy as np
import pytest

from rtmoe import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(*arrays)
        x[idx] = old - h
        down = f(*arrays)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-3):
    """Largest entrywise |a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries sane."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradcheck(build, arrays, h=1e-5):
    """Compare tape gradients of ``build(*tensors) -> scalar Tensor`` with finite differences.

    Returns the worst relative error over all inputs. Must run under float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(*tensors)
    tape.backward(out)

    def value(*arrs):
        with ad.no_grad():
            return float(build(*[ad.tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_err(analytic, numeric_grad(value, arrays, i, h)))
    return worst


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(mod.OUTCOMES.items()):
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
