"""Central finite-difference gradient checking."""
import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn(*arrays)
            flat[i] = old - h
            down = fn(*arrays)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return num / den


def check_gradients(op, arrays, h=1e-5, seed=0):
    """Compare analytic and numeric gradients of ``sum(op(*xs) * R)``.

    Returns the largest relative error over all inputs.  ``R`` is a fixed
    random projection so every output element participates with a
    distinct weight.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    r = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar(*xs):
        return float((op(*[Tensor(x) for x in xs]).data * r).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    (out * r).sum().backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    numeric = numeric_grad(scalar, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
