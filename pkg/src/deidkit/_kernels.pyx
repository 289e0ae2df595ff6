# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense-layer kernels.

Same contract as ``_kernels_py``. Matrix products go straight to BLAS
``dgemm`` (row-major arrays are passed as their column-major transposes);
activations, bias handling and the Adam update are fused loops, which
removes the per-call temporaries that dominate at small batch sizes.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, isfinite
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double[:, ::1] _mat(x):
    return np.ascontiguousarray(x, dtype=np.float64)


cdef void _sigmoid(double* a, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(size):
        a[k] = 1.0 / (1.0 + exp(-a[k]))


cdef void _adam(double* p, const double* g, double* m, double* v, Py_ssize_t size,
                double beta1, double beta2, double lr_t, double eps_t) noexcept nogil:
    cdef Py_ssize_t k
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2
    for k in range(size):
        m[k] = m[k] * beta1 + c1 * g[k]
        v[k] = v[k] * beta2 + c2 * (g[k] * g[k])
        p[k] -= lr_t * m[k] / (sqrt(v[k]) + eps_t)


def dense_forward(W, b, x, int act):
    cdef double[:, ::1] Wv = _mat(W)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] xv = _mat(x)
    cdef int n = xv.shape[0], d_in = xv.shape[1], d_out = Wv.shape[0]
    if Wv.shape[1] != d_in or bv.shape[0] != d_out:
        raise ValueError("dense_forward: shape mismatch")
    out = np.empty((n, d_out), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(d_out):
            ov[i, j] = bv[j]
    cdef double one = 1.0
    cdef char ta = b'T', tb = b'N'
    if n > 0 and d_out > 0 and d_in > 0:
        # out^T (d_out x n) = W (as d_in x d_out, transposed) . x^T (d_in x n)
        dgemm(&ta, &tb, &d_out, &n, &d_in, &one, &Wv[0, 0], &d_in, &xv[0, 0], &d_in, &one, &ov[0, 0], &d_out)
    if act == 1:
        np.tanh(out, out=out)
    elif act == 2:
        _sigmoid(&ov[0, 0] if n * d_out > 0 else NULL, n * d_out)
    return out


def dense_backward(W, x, y, dy, int act):
    cdef double[:, ::1] Wv = _mat(W)
    cdef double[:, ::1] xv = _mat(x)
    cdef double[:, ::1] yv = _mat(y)
    cdef double[:, ::1] dyv = _mat(dy)
    cdef int n = xv.shape[0], d_in = xv.shape[1], d_out = Wv.shape[0]
    if dyv.shape[0] != n or dyv.shape[1] != d_out or yv.shape[0] != n or yv.shape[1] != d_out:
        raise ValueError("dense_backward: shape mismatch")
    dpre_a = np.empty((n, d_out), dtype=np.float64)
    cdef double[:, ::1] dp = dpre_a
    cdef Py_ssize_t i, j
    cdef double yy
    for i in range(n):
        for j in range(d_out):
            if act == 1:
                yy = yv[i, j]
                dp[i, j] = dyv[i, j] * (1.0 - yy * yy)
            elif act == 2:
                yy = yv[i, j]
                dp[i, j] = dyv[i, j] * yy * (1.0 - yy)
            else:
                dp[i, j] = dyv[i, j]
    dW = np.zeros((d_out, d_in), dtype=np.float64)
    db = np.zeros(d_out, dtype=np.float64)
    dx = np.zeros((n, d_in), dtype=np.float64)
    cdef double[:, ::1] dWv = dW
    cdef double[::1] dbv = db
    cdef double[:, ::1] dxv = dx
    for i in range(n):
        for j in range(d_out):
            dbv[j] += dp[i, j]
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'
    if n > 0 and d_out > 0 and d_in > 0:
        # dW^T (d_in x d_out) = x^T (d_in x n) . dpre (n x d_out)
        dgemm(&tn, &tt, &d_in, &d_out, &n, &one, &xv[0, 0], &d_in, &dp[0, 0], &d_out, &zero, &dWv[0, 0], &d_in)
        # dx^T (d_in x n) = W^T (d_in x d_out) . dpre^T (d_out x n)
        dgemm(&tn, &tn, &d_in, &n, &d_out, &one, &Wv[0, 0], &d_in, &dp[0, 0], &d_out, &zero, &dxv[0, 0], &d_in)
    return dW, db, dx


def adam_update(cnp.ndarray p, g, cnp.ndarray m, cnp.ndarray v, double beta1, double beta2, double lr_t, double eps_t):
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update needs C-contiguous parameter and moment arrays")
    cdef double[::1] pv = p.reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t size = pv.shape[0]
    if gv.shape[0] != size or mv.shape[0] != size or vv.shape[0] != size:
        raise ValueError("adam_update: size mismatch")
    if size:
        _adam(&pv[0], &gv[0], &mv[0], &vv[0], size, beta1, beta2, lr_t, eps_t)


def all_finite(a):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t k
    for k in range(av.shape[0]):
        if not isfinite(av[k]):
            return False
    return True
