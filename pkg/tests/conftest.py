import numpy as np
import pytest

from dstsd.tensor import Tape, Tensor, backward


def fd_check(fn, arrays, eps=1e-5, max_entries=60, rng=None):
    """Worst relative error between autodiff and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor; ``arrays`` are the
    numpy values at which the check is made (perturbed in place, restored).
    """
    rng = rng or np.random.default_rng(0)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(leaves)
    grads = backward(tape, loss, wrt=leaves)
    worst = 0.0
    for a, leaf in zip(arrays, leaves):
        g = grads[id(leaf)]
        idx = list(np.ndindex(a.shape))
        if len(idx) > max_entries:
            idx = [idx[i] for i in rng.choice(len(idx), max_entries, replace=False)]
        for i in idx:
            old = a[i]
            a[i] = old + eps
            up = float(fn([Tensor(b) for b in arrays]).data)
            a[i] = old - eps
            dn = float(fn([Tensor(b) for b in arrays]).data)
            a[i] = old
            fd = (up - dn) / (2 * eps)
            scale = abs(fd) + abs(g[i])
            if scale > 1e-7:
                worst = max(worst, abs(fd - g[i]) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- criterion report

CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    """Store the verdict for criterion ``n`` and fail the calling test if needed."""
    CRITERIA[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
