import numpy as np
import pytest

from onsr import autodiff as ad

# one line per end-to-end acceptance check, echoed after the test summary so
# the verdicts are visible even when pytest captures stdout
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar-valued fn w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def check_grad(make_loss, arrays, eps=1e-6, tol=1e-4):
    """Compare reverse-mode grads against finite differences.

    make_loss takes a list of Tensors (one per array in ``arrays``) and
    returns a scalar Tensor.  All work happens in float64.
    """
    tensors = [ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    loss = make_loss(tensors)
    loss.backward()
    for k, t in enumerate(tensors):
        def scalar(xk, k=k):
            ts = [ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=False)
                  for a in arrays]
            ts[k] = ad.Tensor(xk, requires_grad=False)
            return float(make_loss(ts).data)
        num = numeric_grad(scalar, np.asarray(arrays[k], dtype=np.float64), eps=eps)
        ana = t.grad
        assert ana is not None, f"missing grad for input {k}"
        denom = max(1.0, np.abs(num).max())
        err = np.abs(ana - num).max() / denom
        assert err < tol, f"input {k}: grad mismatch {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
