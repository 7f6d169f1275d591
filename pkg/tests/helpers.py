"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from srf import tensor as T

FD_STEP = 1e-5


def numerical_grad(f, arrays, step=FD_STEP):
    """d f / d a for every array in ``arrays`` (f returns a float)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + step
            hi = f()
            a[idx] = old - step
            lo = f()
            a[idx] = old
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, abs_floor=1e-6, abs_tol=1e-7):
    """Largest relative error; entries with tiny analytic values use an absolute test."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    small = np.abs(analytic) < abs_floor
    worst = 0.0
    if np.any(small):
        if np.max(np.abs(analytic[small] - numeric[small])) > abs_tol:
            return np.inf
    big = ~small
    if np.any(big):
        rel = np.abs(analytic[big] - numeric[big]) / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
        worst = float(rel.max())
    return worst


def check_gradients(build, arrays, step=FD_STEP):
    """Compare tape gradients of ``sum(build(*tensors))`` with finite differences.

    ``build`` maps Tensors to an output Tensor; ``arrays`` are float64 inputs.
    Returns the worst relative error over all inputs.
    """
    with T.precision(np.float64):
        leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
        out = build(*leaves)
        T.sum(out).backward()
        analytic = [leaf.grad for leaf in leaves]

        def f():
            with T.no_grad():
                return float(np.sum(build(*[T.Tensor(a) for a in arrays]).data))

        numeric = numerical_grad(f, arrays, step)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
