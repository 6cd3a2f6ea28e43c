"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a|| + ||b||, 1e-12)`` over the flattened arrays."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, arrays, k: int, eps: float = 1e-6) -> np.ndarray:
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(*arrays)
        x[i] = old - eps
        lo = f(*arrays)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def gradcheck(fn, arrays, eps: float = 1e-6, wrt=None) -> float:
    """Max relative error between analytic and numeric gradients of scalar ``fn``.

    ``fn`` maps Tensors to a scalar Tensor; ``arrays`` are float64 inputs that
    are perturbed in place (and restored).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(*ts))

    def scalar(*xs):
        return float(fn(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for k in wrt:
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, arrays, k, eps)))
    return worst


def gradcheck_params(loss_fn, params: dict, per_tensor: int = 8, seed: int = 0,
                     eps: float = 1e-6) -> float:
    """Relative error on ``per_tensor`` randomly chosen entries of every parameter.

    ``loss_fn`` maps a name -> Tensor dict to a scalar Tensor.
    """
    rng = np.random.default_rng(seed)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    ts = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    backward(loss_fn(ts))
    analytic, numeric = [], []
    for name, arr in base.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        g = ts[name].grad
        for j in picks:
            old = flat[j]
            flat[j] = old + eps
            hi = float(loss_fn({k: Tensor(v) for k, v in base.items()}).data)
            flat[j] = old - eps
            lo = float(loss_fn({k: Tensor(v) for k, v in base.items()}).data)
            flat[j] = old
            numeric.append((hi - lo) / (2 * eps))
            analytic.append(0.0 if g is None else g.reshape(-1)[j])
    return relative_error(np.array(analytic), np.array(numeric))
