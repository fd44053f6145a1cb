import os
from pathlib import Path

import numpy as np
import pytest

from bmpq.autograd import Tensor, backward, dense, reshape

DEFAULT_MNIST_ROOT = "/root/data/mnist"


def mnist_root() -> Path:
    return Path(os.environ.get("BMPQ_DATA_ROOT", DEFAULT_MNIST_ROOT))


def have_mnist() -> bool:
    return (mnist_root() / "train-images-idx3-ubyte").exists()


def _probe(out: Tensor, r: np.ndarray) -> Tensor:
    """Scalar ``sum(out * r)`` built from autograd ops."""
    flat = reshape(out, (1, out.data.size))
    return reshape(dense(flat, Tensor(r.reshape(1, -1))), ())


def gradcheck(fn, inputs, h=1e-5, seed=0):
    """Compare analytic and central-difference gradients of ``sum(fn(*inputs) * r)``.

    Returns the worst relative error ``||a - n|| / max(||a||, ||n||)`` over
    all inputs that require grad.
    """
    out = fn(*inputs)
    r = np.random.default_rng(seed).normal(size=out.data.shape)
    for t in inputs:
        t.grad = None
    backward(_probe(out, r))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(np.sum(fn(*inputs).data * r))
            flat[i] = keep - h
            down = float(np.sum(fn(*inputs).data * r))
            flat[i] = keep
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES = {}


class criterion:
    """Record one PASS/FAIL line per acceptance criterion.

    Used as a context manager around the check; ``detail`` can be updated
    inside the block.  An exception inside the block records FAIL.
    """

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        if exc_type is None:
            detail = self.detail
        else:
            reason = str(exc).splitlines()[0][:160] if str(exc) else ""
            detail = f"{self.detail} {exc_type.__name__}: {reason}".strip()
        line = f"criterion {self.number} [{self.title}]: {status}"
        ACCEPTANCE_LINES[self.number] = f"{line} - {detail}" if detail else line
        print(ACCEPTANCE_LINES[self.number])
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
