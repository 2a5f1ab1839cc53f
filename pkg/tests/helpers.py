"""Finite-difference utilities shared by the test modules."""
import numpy as np

from mmdistill import tensor as T


def rel_err(a, b) -> float:
    """Norm-wise relative error, guarded for exactly-zero gradients."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arrays, idx, coords, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` wrt ``arrays[idx]`` at flat ``coords``."""
    base = arrays[idx]
    out = np.empty(len(coords))
    for n, k in enumerate(coords):
        plus = base.copy().ravel()
        minus = base.copy().ravel()
        plus[k] += h
        minus[k] -= h
        args_p = list(arrays)
        args_m = list(arrays)
        args_p[idx] = plus.reshape(base.shape)
        args_m[idx] = minus.reshape(base.shape)
        out[n] = (f(*args_p) - f(*args_m)) / (2 * h)
    return out


def check_grads(build, arrays, rng, n_coords=12, h=1e-5):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences.

    Returns the worst relative error over inputs.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    grads = T.backward(build(*tensors), tensors)

    def value(*arrs):
        with T.no_grad():
            return build(*[T.Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, a in enumerate(arrays):
        coords = rng.choice(a.size, size=min(n_coords, a.size), replace=False)
        num = numeric_grad(value, arrays, i, coords, h)
        worst = max(worst, rel_err(grads[i].data.ravel()[coords], num))
    return worst



# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list = []
