"""Central finite-difference oracle, independent of the tape."""

import numpy as np

from csagat import tensor as T
from csagat.tensor import Tensor


def numerical_grad(f, arrays, eps=1e-5):
    """d f / d array for each array in ``arrays`` (perturbed in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def op_rel_errors(op, *arrays, seed=0):
    """Relative error of the tape gradient of ``sum(op(*inputs) * R)`` per input."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=float) for a in arrays]
    R = rng.normal(size=op(*[Tensor(a) for a in arrays]).shape)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.new_tape():
        T.backward(T.sum(T.mul(op(*leaves), Tensor(R))))
    numeric = numerical_grad(lambda: float((op(*[Tensor(a) for a in arrays]).data * R).sum()), arrays)
    return [rel_error(leaf.grad, num) for leaf, num in zip(leaves, numeric)]
