"""Pure-numpy dense-layer kernels.

Activation codes: 0 = linear, 1 = tanh, 2 = sigmoid.
"""
import numpy as np


def dense_forward(W, b, x, act):
    pre = x @ W.T + b
    if act == 1:
        return np.tanh(pre)
    if act == 2:
        return 1.0 / (1.0 + np.exp(-pre))
    return pre


def dense_backward(W, x, y, dy, act):
    """Return (dW, db, dx) for one layer given its input, output and output gradient."""
    if act == 1:
        dpre = dy * (1.0 - y * y)
    elif act == 2:
        dpre = dy * y * (1.0 - y)
    else:
        dpre = dy
    dW = dpre.T @ x
    db = dpre.sum(axis=0)
    dx = dpre @ W
    return dW, db, dx


def adam_update(p, g, m, v, beta1, beta2, lr_t, eps_t):
    """In-place Adam moment and parameter update.

    ``lr_t`` carries the first-moment bias correction and ``eps_t`` the
    fuzz term rescaled by the second-moment correction.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr_t * m / (np.sqrt(v) + eps_t)


def all_finite(a):
    return bool(np.all(np.isfinite(a)))
