"""Row-wise vector operations with their hand-written derivatives.

All functions take 2-D arrays with one sample per row. ``*_backward``
helpers return gradients with respect to their inputs.
"""
import numpy as np

from deidkit.errors import NumericError

_TINY = 1e-12


def normalize(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < _TINY):
        raise NumericError("cannot normalise a zero vector")
    return v / norm, norm


def normalize_backward(u, norm, du):
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / norm


def cosine(a, b):
    """Cosine similarity per row plus the pieces needed for its gradient."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < _TINY) or np.any(nb < _TINY):
        raise NumericError("cosine of a zero-norm vector")
    c = np.sum(a * b, axis=-1) / (na * nb)
    return c, (na, nb)


def cosine_backward(a, b, c, norms, dc):
    """Gradients of ``cos(a, b)`` w.r.t. ``a`` and ``b`` scaled by ``dc`` (one per row)."""
    na, nb = norms
    dc = np.asarray(dc)[..., None]
    c = c[..., None]
    na = na[..., None]
    nb = nb[..., None]
    da = dc * (b / (na * nb) - c * a / (na * na))
    db = dc * (a / (na * nb) - c * b / (nb * nb))
    return da, db


def l1_rows(a, b):
    return np.sum(np.abs(a - b), axis=-1)


def l1_rows_backward(a, b, dl):
    """Subgradient of ``sum |a - b|`` w.r.t. ``a`` (``np.sign`` gives 0 at ties)."""
    return np.asarray(dl)[..., None] * np.sign(a - b)


def kld_rows(mu, logvar):
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


def kld_rows_backward(mu, logvar, dl):
    dl = np.asarray(dl)[..., None]
    return dl * mu, dl * 0.5 * (np.exp(logvar) - 1.0)
