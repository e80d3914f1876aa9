"""Finite-difference gradient checking shared by the test modules."""

from __future__ import annotations

import numpy as np

from mambamdn.autodiff import Tensor, sum_, mul


def numeric_grad(f, arrays, index, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(*arrays)
        x[i] = old - eps
        down = f(*arrays)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_op(op, arrays, rng, eps=1e-6, skip=(), floor=1e-12):
    """Worst relative error between autodiff and central differences for every input.

    ``op`` maps tensors to a tensor; the scalar loss is ``sum(op(...) * R)``
    with a fixed random ``R`` so every output entry contributes.  ``floor``
    bounds the error scale from below for inputs whose gradient is tiny.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    weight = rng.normal(size=probe.shape)

    def loss_value(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weight).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    sum_(mul(op(*tensors), Tensor(weight))).backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        if i in skip:
            continue
        num = numeric_grad(loss_value, arrays, i, eps)
        worst = max(worst, rel_err(t.grad, num, floor))
    return worst
