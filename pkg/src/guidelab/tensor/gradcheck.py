import numpy as np

from .tensor import Tensor


def numerical_grad(f, arrays, index, eps=1e-6):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]`` (float64)."""
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = float(f(*arrays))
        x[i] = old - eps
        fm = float(f(*arrays))
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(a, b, floor=1e-8):
    """Norm-wise relative error max|a - b| / max|b| (``b`` is the reference)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def gradcheck(fn, *arrays, eps=1e-6, floor=1e-8):
    """Compare autodiff gradients of scalar ``fn(*tensors)`` against finite differences.

    Returns the worst relative error over all inputs. Inputs are promoted to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()

    def value(*arrs):
        return fn(*[Tensor(a) for a in arrs]).data

    worst = 0.0
    for k, t in enumerate(ts):
        num = numerical_grad(value, arrays, k, eps)
        worst = max(worst, max_rel_error(t.grad, num, floor))
    return worst
