"""Central finite-difference gradient checking at 64-bit precision."""

import numpy as np

from voxfuse.autodiff import Tensor, Graph


def numeric_grad(fn, tensors, wrt, step=1e-4):
    """Central finite differences of scalar fn(*tensors) w.r.t. tensors[wrt]."""
    base = tensors[wrt].data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (+1, -1):
            bumped = base.copy().reshape(-1)
            bumped[i] += sign * step
            args = list(tensors)
            args[wrt] = Tensor(bumped.reshape(base.shape), requires_grad=True, dtype=np.float64)
            val = fn(*args)
            flat[i] += sign * float(val.data.reshape(-1)[0]) / (2 * step)
    return grad


def check_gradients(fn, tensors, wrt_indices=None, step=1e-4, rtol=1e-5):
    """Compare analytic gradients of scalar fn(*tensors) against central
    differences. Inputs must be float64. Returns max relative error."""
    assert all(t.dtype == np.float64 for t in tensors)
    if wrt_indices is None:
        wrt_indices = [i for i, t in enumerate(tensors) if t.requires_grad]
    with Graph() as g:
        loss = fn(*tensors)
        g.backward(loss)
        analytic = [g.grad(tensors[i]) for i in wrt_indices]
    worst = 0.0
    for slot, i in enumerate(wrt_indices):
        num = numeric_grad(fn, tensors, i, step=step)
        denom = np.maximum(np.abs(num), np.maximum(np.abs(analytic[slot]), 1.0))
        rel = np.abs(analytic[slot] - num) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst < rtol, f"gradient mismatch: max relative error {worst:.3e} >= {rtol}"
    return worst
