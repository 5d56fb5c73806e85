"""Central finite-difference gradient checking used across the test suite."""

import numpy as np

from fdp import autodiff as ad


def fd_gradients(fn, tensors, eps=1e-4):
    """Central differences of a scalar-valued fn w.r.t. each tensor's entries."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*tensors).item()
            flat[i] = orig - eps
            fm = fn(*tensors).item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g.reshape(t.data.shape))
    return grads


def check_gradients(fn, tensors, eps=1e-4, rel_tol=1e-4):
    """Assert analytic gradients match central differences within rel_tol.

    Relative error is measured against the largest finite-difference entry of
    each input, so zero-gradient inputs compare absolutely.
    """
    for t in tensors:
        t.grad = None
    with ad.Tape():
        out = fn(*tensors)
        ad.backward(out)
    numeric = fd_gradients(fn, tensors, eps)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(float(np.abs(num).max()), 1e-6)
        rel = float(np.abs(analytic - num).max()) / denom
        worst = max(worst, rel)
        assert rel < rel_tol, f"gradient mismatch: rel error {rel:.3e} >= {rel_tol}"
    return worst


def t64(rng, shape, scale=1.0, offset=0.0, requires_grad=True):
    data = rng.standard_normal(shape) * scale + offset
    return ad.tensor(data, requires_grad=requires_grad, dtype=np.float64)
