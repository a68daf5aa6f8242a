"""Central finite-difference gradient checks for the engine."""

import numpy as np

from . import diffengine as de


def numeric_gradient(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(**arrays)`` w.r.t. every entry of every array."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn(**arrays)
            flat[k] = orig - h
            down = fn(**arrays)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_error(analytic, numeric):
    """``max|a - n| / max(max|a|, max|n|)`` for one array, 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, arrays, h=1e-5):
    """Compare engine gradients of ``build(**tensors)`` with finite differences.

    ``build`` maps named tensors to a scalar tensor. Returns the maximum
    relative error per input name.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    leaves = {k: de.parameter(v.copy(), name=k) for k, v in arrays.items()}
    out = build(**leaves)
    grads = de.backward(out, wrt=list(leaves.values()))
    analytic = {k: grads[t] for k, t in leaves.items()}

    def value(**arrs):
        return build(**{k: de.constant(v) for k, v in arrs.items()}).item()

    numeric = numeric_gradient(value, arrays, h)
    return {k: relative_error(analytic[k], numeric[k]) for k in arrays}
