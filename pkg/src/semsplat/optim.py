"""Adaptive moment estimation over named parameter groups.

The scene's attribute arrays are registered as groups with individual
learning rates. Densification changes the number of rows mid-run, so the
moment buffers can be re-indexed: surviving rows keep their state, new rows
start from zero.
"""

import numpy as np


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.groups = {}  # name -> dict(lr, m, v)

    def register(self, name, shape, lr):
        self.groups[name] = {"lr": float(lr), "m": np.zeros(shape),
                             "v": np.zeros(shape)}

    def set_lr(self, name, lr):
        self.groups[name]["lr"] = float(lr)

    def step(self, params, grads):
        """One update over {name: array} with matching {name: grad}; arrays
        are updated in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            g = self.groups[name]
            g["m"] = self.beta1 * g["m"] + (1.0 - self.beta1) * grad
            g["v"] = self.beta2 * g["v"] + (1.0 - self.beta2) * grad * grad
            m_hat = g["m"] / bc1
            v_hat = g["v"] / bc2
            params[name] -= g["lr"] * m_hat / (np.sqrt(v_hat) + self.eps)

    def reindex(self, names, keep_indices, n_new):
        """After densify/prune: rows keep_indices survive, n_new rows are
        appended with zeroed moments."""
        for name in names:
            g = self.groups[name]
            for key in ("m", "v"):
                old = g[key]
                fresh = np.zeros((n_new,) + old.shape[1:])
                g[key] = np.concatenate([old[keep_indices], fresh], axis=0)


def exponential_decay(initial, final, fraction):
    """Log-linear interpolation from initial to final over fraction in [0, 1]."""
    fraction = min(max(fraction, 0.0), 1.0)
    return float(initial * (final / initial) ** fraction)
