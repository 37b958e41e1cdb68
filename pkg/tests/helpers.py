import numpy as np

from solarsmt import tensor as T


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-abs error scaled by the larger gradient magnitude."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def analytic_grads(build, tensors):
    """Run ``build()`` inside a graph, backprop, and return grads of ``tensors``."""
    for t in tensors:
        t.grad = None
    with T.Graph() as g:
        loss = build()
        T.backward(loss, g)
    return [t.grad.copy() for t in tensors]
