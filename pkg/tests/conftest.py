import numpy as np
import pytest

from rmnet.autodiff import backward, numerical_grad, precision


def grad_rel_err(loss_fn, tensors, eps=1e-5):
    """max |analytic - central difference| / (|analytic| + 1e-8) over every entry of ``tensors``."""
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        num = numerical_grad(lambda: loss_fn().item(), t.data, eps)
        worst = max(worst, float((np.abs(t.grad - num) / (np.abs(t.grad) + 1e-8)).max()))
    return worst


def jitter_params(layer, rng, scale=0.3):
    """Move every parameter off its initial value so no activation sits exactly on a kink."""
    for p in layer.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {name:<26} {'PASS' if ok else 'FAIL'}  {detail}")
