"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

__all__ = ["numerical_gradient", "relative_error", "check_network_gradients"]


def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x``,
    perturbed in place."""
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-5):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    round-off by round-off.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_network_gradients(net, x, rng=None, h=1e-5):
    """Compare backward() against finite differences for every parameter
    and the input of ``net`` under the loss ``sum(forward(x) * R)``.

    Returns a dict name -> max relative error. Use a float64 network.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=net.dtype)
    out = net.forward(x, train=True)
    proj = rng.standard_normal(out.shape) / np.sqrt(out.size)
    dx = net.backward(proj)
    analytic = dict(zip((n for n, _ in net.named_parameters()), (g.copy() for g in net.gradients())))

    def loss():
        return float(np.sum(net.forward(x, train=True) * proj))

    errors = {}
    for name, p in net.named_parameters():
        errors[name] = relative_error(analytic[name], numerical_gradient(loss, p, h))
    errors["input"] = relative_error(dx, numerical_gradient(loss, x, h))
    return errors
