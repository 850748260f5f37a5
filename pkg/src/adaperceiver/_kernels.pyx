# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row kernels for the tensor engine.

Every routine works on C-contiguous 2D views: ``rows`` x ``cols``. The Python
side (``kernels.py``) reshapes arbitrary tensors into that layout and keeps a
numpy twin of each routine for when this module is not built.
"""

from libc.math cimport exp, tanh, sqrt

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715


def softmax_fwd(real[:, ::1] x, const unsigned char[:, ::1] mask, bint has_mask,
                real[:, ::1] out):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t mrows = mask.shape[0] if has_mask else 1
    cdef Py_ssize_t r, j, mr
    cdef double m, s, e
    with nogil:
        for r in range(rows):
            mr = r % mrows
            m = -1e300
            for j in range(cols):
                if (not has_mask or mask[mr, j]) and x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(cols):
                if not has_mask or mask[mr, j]:
                    e = exp(x[r, j] - m)
                    out[r, j] = <real>e
                    s += e
                else:
                    out[r, j] = 0
            s = 1.0 / s
            for j in range(cols):
                out[r, j] = <real>(out[r, j] * s)


def softmax_bwd(real[:, ::1] y, real[:, ::1] g, real[:, ::1] out):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1]
    cdef Py_ssize_t r, j
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += g[r, j] * y[r, j]
            for j in range(cols):
                out[r, j] = <real>(y[r, j] * (g[r, j] - dot))


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                  real[:, ::1] out, real[:, ::1] xhat, real[::1] rstd):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double mu, var, d, inv
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[r, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[r, j] - mu
                var += d * d
            var /= cols
            inv = 1.0 / sqrt(var + eps)
            rstd[r] = <real>inv
            for j in range(cols):
                d = (x[r, j] - mu) * inv
                xhat[r, j] = <real>d
                out[r, j] = <real>(d * gain[j] + bias[j])


def layernorm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gain,
                  real[:, ::1] dx, double[::1] dgain, double[::1] dbias):
    cdef Py_ssize_t rows = g.shape[0], cols = g.shape[1]
    cdef Py_ssize_t r, j
    cdef double a, b, gh
    with nogil:
        for r in range(rows):
            a = 0.0
            b = 0.0
            for j in range(cols):
                gh = g[r, j] * gain[j]
                a += gh
                b += gh * xhat[r, j]
                dgain[j] += g[r, j] * xhat[r, j]
                dbias[j] += g[r, j]
            a /= cols
            b /= cols
            for j in range(cols):
                gh = g[r, j] * gain[j]
                dx[r, j] = <real>(rstd[r] * (gh - a - xhat[r, j] * b))


def gelu_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = <real>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))


def gelu_bwd(real[::1] x, real[::1] g, real[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i] = <real>(g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt))
