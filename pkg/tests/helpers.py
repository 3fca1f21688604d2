import numpy as np

from wavecorr.tensor import GradientTape, backward


def tape_grads(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each input array."""
    tape = GradientTape()
    leaves = [tape.leaf(a, slot=f"x{k}") for k, a in enumerate(arrays)]
    out = backward(tape, fn(*leaves))
    return [out.get(f"x{k}", np.zeros_like(a)) for k, a in enumerate(arrays)]


def central_diff(fn, arrays, step=1e-5):
    """Central-difference gradient of ``fn(*arrays) -> float`` w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[k][idx] += step
            dn[k][idx] -= step
            g[idx] = (fn(*up) - fn(*dn)) / (2 * step)
        grads.append(g)
    return grads


def assert_close_rel(a, b, rtol=1e-4, atol=1e-9):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    bad = np.abs(a - b) > rtol * scale + atol
    assert not bad.any(), f"max abs diff {np.max(np.abs(a - b)):.3g} at {np.argwhere(bad)[:3].tolist()}"
