"""Shared test helpers: the central-finite-difference gradient oracle.

The oracle only ever calls the forward path, so it stays independent of the
backward implementations it checks.
"""

import numpy as np
import pytest

from rcnnvo.autodiff import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def numeric_gradient(fn, values: list[np.ndarray], step: float = FD_STEP
                     ) -> list[np.ndarray]:
    """Central differences of a scalar-valued fn over a list of input arrays."""
    grads = []
    for which, base in enumerate(values):
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for i in range(base.size):
            bumped = [v.copy() for v in values]
            bumped[which].reshape(-1)[i] += step
            hi = fn(*bumped)
            bumped[which].reshape(-1)[i] -= 2 * step
            lo = fn(*bumped)
            flat[i] = (hi - lo) / (2 * step)
        grads.append(grad)
    return grads


def check_gradients(build_loss, values: list[np.ndarray],
                    rtol: float = FD_RTOL, atol: float = FD_ATOL) -> float:
    """Compare analytic gradients of build_loss against central differences.

    ``build_loss`` maps Tensors to a scalar Tensor; the same function is fed
    raw arrays (wrapped fresh each call) for the numeric side.  Returns the
    worst mismatch ratio |a - n| / (atol + rtol * max(|a|, |n|)).
    """
    tensors = [Tensor(v, requires_grad=True) for v in values]
    build_loss(*tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def forward(*arrays):
        return float(build_loss(*[Tensor(a) for a in arrays]).data)

    numeric = numeric_gradient(forward, [v.copy() for v in values])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    assert worst <= 1.0, f"gradient mismatch: worst ratio {worst:.3f} (>1 fails)"
    return worst


@pytest.fixture
def nprng():
    return np.random.default_rng(20240817)
