"""Central finite-difference gradient checks used by tests and ``selftest``."""

import numpy as np

from .autodiff import backward


def fd_gradient_check(loss_fn, leaves, rng, n_coords=20, step=1e-5):
    """Compare backward gradients with central differences at random coordinates.

    ``loss_fn()`` rebuilds the scalar loss from the current leaf values.
    Returns the worst relative error ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for leaf in leaves:
        leaf.zero_grad()
    backward(loss_fn())
    analytic = [leaf.grad.copy() for leaf in leaves]

    sizes = np.array([leaf.value.size for leaf in leaves])
    worst = 0.0
    for _ in range(n_coords):
        which = rng.integers(0, len(leaves)) if len(leaves) > 1 else 0
        leaf = leaves[which]
        flat = rng.integers(0, int(sizes[which]))
        idx = np.unravel_index(flat, leaf.value.shape)
        orig = leaf.value[idx]
        leaf.value = leaf.value.copy()
        leaf.value[idx] = orig + step
        up = float(loss_fn().value)
        leaf.value[idx] = orig - step
        down = float(loss_fn().value)
        leaf.value[idx] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[which][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def fd_jacobian(fn, x, step=1e-6):
    """Dense Jacobian of a vector function by central differences."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(fn(x)).ravel()
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        up = np.asarray(fn(x + e.reshape(x.shape))).ravel()
        down = np.asarray(fn(x - e.reshape(x.shape))).ravel()
        jac[:, i] = (up - down) / (2 * step)
    return jac
