"""Row kernels behind the tensor primitives, compiled or pure numpy.

The compiled extension ``adaperceiver._kernels`` is used when it imports and
``ADAPERCEIVER_KERNELS`` is not set to ``numpy``. Both backends share the
signatures below so either can be swapped in at runtime via :func:`use_backend`.
"""

from __future__ import annotations

import os

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715

try:
    from . import _kernels as _ext
except ImportError:  # extension not built
    _ext = None

_NO_MASK = np.ones((1, 1), dtype=np.uint8)


class NumpyBackend:
    name = "numpy"

    @staticmethod
    def softmax_fwd(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        if mask is None:
            m = x.max(axis=-1, keepdims=True)
            e = np.exp(x - m)
        else:
            xm = np.where(mask, x, -np.inf)
            m = xm.max(axis=-1, keepdims=True)
            e = np.exp(xm - m)
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    @staticmethod
    def layernorm_fwd(x, gain, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        return xhat * gain + bias, xhat, rstd[..., 0]

    @staticmethod
    def layernorm_bwd(g, xhat, rstd, gain):
        d = g.shape[-1]
        gh = g * gain
        a = gh.mean(axis=-1, keepdims=True)
        b = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = rstd[..., None] * (gh - a - xhat * b)
        g2 = g.reshape(-1, d)
        dgain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        dbias = g2.sum(axis=0)
        return dx, dgain, dbias

    @staticmethod
    def gelu_fwd(x: np.ndarray) -> np.ndarray:
        return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))

    @staticmethod
    def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
        t = np.tanh(GELU_C * (x + GELU_A * x**3))
        dt = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


class CompiledBackend:
    name = "compiled"

    @staticmethod
    def softmax_fwd(x, mask):
        x = np.ascontiguousarray(x)
        cols = x.shape[-1]
        out = np.empty_like(x)
        if mask is None:
            _ext.softmax_fwd(x.reshape(-1, cols), _NO_MASK, False, out.reshape(-1, cols))
        else:
            m = np.ascontiguousarray(mask, dtype=np.uint8)
            _ext.softmax_fwd(x.reshape(-1, cols), m, True, out.reshape(-1, cols))
        return out

    @staticmethod
    def softmax_bwd(y, g):
        y = np.ascontiguousarray(y)
        g = np.ascontiguousarray(g, dtype=y.dtype)
        cols = y.shape[-1]
        out = np.empty_like(y)
        _ext.softmax_bwd(y.reshape(-1, cols), g.reshape(-1, cols), out.reshape(-1, cols))
        return out

    @staticmethod
    def layernorm_fwd(x, gain, bias, eps):
        x = np.ascontiguousarray(x)
        d = x.shape[-1]
        rows = x.size // d
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        _ext.layernorm_fwd(
            x.reshape(rows, d),
            np.ascontiguousarray(gain, dtype=x.dtype),
            np.ascontiguousarray(bias, dtype=x.dtype),
            float(eps),
            out.reshape(rows, d),
            xhat.reshape(rows, d),
            rstd,
        )
        return out, xhat, rstd.reshape(x.shape[:-1])

    @staticmethod
    def layernorm_bwd(g, xhat, rstd, gain):
        dt = xhat.dtype
        g = np.ascontiguousarray(g, dtype=dt)
        d = g.shape[-1]
        rows = g.size // d
        dx = np.empty_like(g)
        dgain = np.zeros(d, dtype=np.float64)
        dbias = np.zeros(d, dtype=np.float64)
        _ext.layernorm_bwd(
            g.reshape(rows, d),
            np.ascontiguousarray(xhat).reshape(rows, d),
            np.ascontiguousarray(rstd).reshape(rows),
            np.ascontiguousarray(gain, dtype=dt),
            dx.reshape(rows, d),
            dgain,
            dbias,
        )
        return dx, dgain.astype(dt), dbias.astype(dt)

    @staticmethod
    def gelu_fwd(x):
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        _ext.gelu_fwd(x.reshape(-1), out.reshape(-1))
        return out

    @staticmethod
    def gelu_bwd(x, g):
        x = np.ascontiguousarray(x)
        g = np.ascontiguousarray(g, dtype=x.dtype)
        out = np.empty_like(x)
        _ext.gelu_bwd(x.reshape(-1), g.reshape(-1), out.reshape(-1))
        return out


BACKENDS = {"numpy": NumpyBackend}
if _ext is not None:
    BACKENDS["compiled"] = CompiledBackend


def _default_backend():
    requested = os.environ.get("ADAPERCEIVER_KERNELS", "").strip().lower()
    if requested in BACKENDS:
        return BACKENDS[requested]
    return BACKENDS.get("compiled", NumpyBackend)


backend = _default_backend()


def use_backend(name: str):
    """Switch the active kernel backend; returns the previous backend's name."""
    global backend
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    previous = backend.name
    backend = BACKENDS[name]
    return previous


def compiled_available() -> bool:
    return "compiled" in BACKENDS
