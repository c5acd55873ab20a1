"""Central-difference gradient oracle shared by the test modules.

Independent of the tape: perturbs raw parameter arrays in place and
re-evaluates a scalar-producing closure.
"""

from __future__ import annotations

import numpy as np

from hetmoe.tensor import Tape, Tensor


def numerical_grads(f, tensors: list[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` with respect to each tensor's data."""
    grads = []
    for t in tensors:
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def analytic_grads(build_loss, tensors: list[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.linalg.norm(n.ravel())
    diff = np.linalg.norm((a - n).ravel())
    if denom < 1e-12:
        return diff
    return diff / denom


def check_gradients(build_loss, tensors: list[Tensor], h: float = 1e-3,
                    rtol: float = 1e-3) -> float:
    """Assert analytic gradients match the finite-difference oracle.

    ``build_loss`` must rebuild the graph from the tensors' current data and
    return a scalar Tensor. Returns the worst relative error seen.
    """
    analytic = analytic_grads(build_loss, tensors)
    numeric = numerical_grads(lambda: build_loss().item(), tensors, h=h)
    worst = 0.0
    for t, a, n in zip(tensors, analytic, numeric):
        err = relative_error(a, n)
        assert err <= rtol, (
            f"gradient mismatch for tensor of shape {t.shape}: rel err {err:.3e} > {rtol}"
        )
        worst = max(worst, err)
    return worst
