"""Finite-difference utilities shared by the gradient tests."""

import numpy as np

from manf.tensor import Tensor, no_grad


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            up = fn(*arrays)
            a[idx] = orig - h
            down = fn(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_op_grad(op, arrays, seed=0, h=1e-5):
    """Max relative error between autodiff and central differences for ``op``.

    The output is contracted with a fixed random weight so every output
    entry contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        out_shape = op(*[Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(seed).normal(size=out_shape)

    def scalar(*arrs):
        with no_grad():
            return float(np.sum(op(*[Tensor(a) for a in arrs]).data * w))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * w).sum().backward()
    num = numeric_grad(scalar, arrays, h)
    return max(rel_err(t.grad, n) for t, n in zip(ts, num))
