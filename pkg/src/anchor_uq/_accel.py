"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``ANCHOR_UQ_DISABLE_NUMBA`` is unset (or ``0``).  Both paths
compute the same quantities; results agree to floating-point rounding,
not bit-for-bit.  ``set_backend`` switches at runtime (tests and the
benchmark script use it to compare the two).
"""

import math
import os

import numpy as np
from scipy.special import ndtr

_DISABLED = os.environ.get("ANCHOR_UQ_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by ANCHOR_UQ_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

_BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_2PI = 1.0 / (2.0 * math.pi)


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return _BACKEND


def set_backend(name):
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is unavailable or disabled")
    _BACKEND = name


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def _adam_numpy(params, grads, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * (grads * grads)
    denom = np.sqrt(v)
    denom *= 1.0 / math.sqrt(c2)
    denom += eps
    params -= (lr / c1) * m / denom


def _ntk_map_numpy(dots):
    u = np.clip(dots, -1.0, 1.0)
    return _INV_2PI * u * (np.pi - np.arccos(u))


def _rbf_numpy(a, b, lengthscale, variance):
    # explicit differences: the |a|^2+|b|^2-2ab expansion loses digits near the diagonal
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return variance * np.exp(-0.5 * sq / (lengthscale * lengthscale))


def _ei_numpy(mu, sigma, f_best, xi):
    out = np.zeros_like(mu)
    pos = sigma > 0
    imp = mu[pos] - f_best - xi
    z = imp / sigma[pos]
    out[pos] = imp * ndtr(z) + sigma[pos] * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    # the closed form can dip a hair below zero for very negative z
    np.maximum(out, 0.0, out=out)
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True, error_model="numpy")
    def _adam_numba(params, grads, m, v, lr, beta1, beta2, eps, step):
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        lr_c = lr / c1
        inv_sc2 = 1.0 / math.sqrt(c2)
        b1c = 1.0 - beta1
        b2c = 1.0 - beta2
        for i in range(params.size):
            g = grads[i]
            mi = beta1 * m[i] + b1c * g
            vi = beta2 * v[i] + b2c * (g * g)
            m[i] = mi
            v[i] = vi
            params[i] -= lr_c * mi / (math.sqrt(vi) * inv_sc2 + eps)

    @njit(cache=True, error_model="numpy")
    def _ntk_map_numba(dots):
        flat_in = dots.reshape(-1)
        flat_out = np.empty(flat_in.size)
        for i in range(flat_in.size):
            u = flat_in[i]
            if u > 1.0:
                u = 1.0
            elif u < -1.0:
                u = -1.0
            flat_out[i] = _INV_2PI * u * (math.pi - math.acos(u))
        return flat_out.reshape(dots.shape)

    @njit(cache=True, error_model="numpy")
    def _rbf_numba(a, b, lengthscale, variance):
        n, d = a.shape
        p = b.shape[0]
        out = np.empty((n, p))
        scale = -0.5 / (lengthscale * lengthscale)
        for i in range(n):
            for j in range(p):
                s = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    s += t * t
                out[i, j] = variance * math.exp(scale * s)
        return out

    @njit(cache=True, error_model="numpy")
    def _ei_numba(mu, sigma, f_best, xi):
        out = np.zeros_like(mu)
        for i in range(mu.size):
            s = sigma[i]
            if s > 0.0:
                imp = mu[i] - f_best - xi
                z = imp / s
                cdf = 0.5 * math.erfc(-z / math.sqrt(2.0))
                val = imp * cdf + s * _INV_SQRT_2PI * math.exp(-0.5 * z * z)
                out[i] = val if val > 0.0 else 0.0
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def adam_update(params, grads, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam update on flat float64 buffers."""
    if _BACKEND == "numba":
        _adam_numba(params, grads, m, v, float(lr), float(beta1), float(beta2), float(eps), int(step))
    else:
        _adam_numpy(params, grads, m, v, lr, beta1, beta2, eps, step)


def ntk_map(dots):
    """Apply the two-layer ReLU NTK dot-product map elementwise (inputs clamped to [-1, 1])."""
    dots = np.ascontiguousarray(dots, dtype=np.float64)
    if _BACKEND == "numba":
        return _ntk_map_numba(dots)
    return _ntk_map_numpy(dots)


def rbf_gram(a, b, lengthscale, variance):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _BACKEND == "numba":
        return _rbf_numba(a, b, float(lengthscale), float(variance))
    return _rbf_numpy(a, b, lengthscale, variance)


def ei_batch(mu, sigma, f_best, xi):
    mu = np.ascontiguousarray(mu, dtype=np.float64).ravel()
    sigma = np.ascontiguousarray(sigma, dtype=np.float64).ravel()
    if _BACKEND == "numba":
        return _ei_numba(mu, sigma, float(f_best), float(xi))
    return _ei_numpy(mu, sigma, float(f_best), float(xi))
