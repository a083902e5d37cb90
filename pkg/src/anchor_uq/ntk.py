"""Analytic and empirical neural tangent kernels and their Fourier spectra.

The analytic kernel is the two-layer ReLU dot-product NTK on the unit
sphere, ``h(u) = u * (pi - arccos(u)) / (2*pi)``.  Scalar or low-dimensional
inputs are placed on the sphere by appending a constant 1 coordinate and
normalizing (``to_sphere``); that lifting is what makes a shift of the raw
domain change the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky

from . import _accel, nn
from .errors import DomainError, NumericError

DOMAIN_SLACK = 1e-9
SPECTRUM_GRID = 256


def ntk_dot(u):
    """Two-layer ReLU NTK as a function of the dot product ``u = x_i . x_j``.

    Values within ``1e-9`` outside ``[-1, 1]`` are clamped (rounding noise
    from normalized vectors); anything further out raises ``DomainError``.
    """
    arr = np.asarray(u, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0 + DOMAIN_SLACK) or np.any(~np.isfinite(arr)):
        raise DomainError(f"NTK dot-product argument outside [-1, 1]: {arr[np.abs(arr) > 1 + DOMAIN_SLACK]}")
    out = _accel.ntk_map(np.atleast_1d(arr))
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def ntk_derivative(u):
    """d h / d u on the open interval (-1, 1)."""
    u = np.asarray(u, dtype=np.float64)
    return (np.pi - np.arccos(u) + u / np.sqrt(1.0 - u * u)) / (2 * np.pi)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("cannot normalize a zero vector")
    return v / n


def to_sphere(x):
    """Lift rows of ``x`` onto the unit sphere: append a 1 and normalize."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _unit(np.concatenate([x, np.ones((x.shape[0], 1))], axis=1))


def ntk_gram(a, b=None):
    """Analytic kernel matrix ``h(A B^T)`` for row-wise unit-norm inputs."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=np.float64))
    dots = a @ b.T
    if np.any(np.abs(dots) > 1.0 + DOMAIN_SLACK):
        raise DomainError("ntk_gram expects unit-norm rows")
    return _accel.ntk_map(dots)


def _unit_pair_ntk(a, b):
    # angle from the half-angle form, well conditioned near 0 unlike arccos(a . b)
    theta = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))
    u = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return u * (np.pi - theta) / (2 * np.pi)


def shifted_ntk(x_i, x_j, c, renormalize: bool = True):
    """Kernel value of the shifted pair and the residual ``gamma`` it leaves behind.

    Returns ``(k_shift, gamma)`` with ``k_shift = h(a . b)`` where ``a`` and
    ``b`` are ``x_i - c`` and ``x_j - c`` (renormalized to unit length when
    ``renormalize``), and ``gamma = h(x_i . x_j) - k_shift`` computed
    exactly, so ``k_shift + gamma`` reproduces the unshifted kernel.  The
    unshifted inputs are normalized too when ``renormalize`` is set.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    a, b = x_i - c, x_j - c
    if renormalize:
        a, b = _unit(a), _unit(b)
        x_i, x_j = _unit(x_i), _unit(x_j)
        k_base, k_shift = _unit_pair_ntk(x_i, x_j), _unit_pair_ntk(a, b)
        return k_shift, k_base - k_shift
    k_base = ntk_dot(np.sum(x_i * x_j, axis=-1))
    k_shift = ntk_dot(np.sum(a * b, axis=-1))
    return k_shift, k_base - k_shift


def gamma_taylor(x_i, x_j, c):
    """First-order expansion of the kernel change under an (unnormalized) shift.

    With ``u = x_i . x_j`` and ``delta = c . (x_i + x_j - c)`` the shifted
    dot product is ``u - delta``.  The expansion keeps the linear term of the
    prefactor plus the arccos correction taken at the shifted argument::

        gamma ~ delta * (pi - arccos(u)) / (2 pi)
              + delta * (u - delta) / (2 pi * sqrt(1 - (u - delta)^2))

    It agrees with the exact unnormalized residual up to O(|c|^2); it is a
    diagnostic only and nothing else in the package depends on it.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    u = np.sum(x_i * x_j, axis=-1)
    delta = np.sum(c * (x_i + x_j - c), axis=-1)
    us = u - delta
    return delta * (np.pi - np.arccos(u)) / (2 * np.pi) + delta * us / (2 * np.pi * np.sqrt(1 - us * us))


def anchored_dot(x_i, x_j, c):
    """Dot product of the lifted tuples ``[c, x_i - c] . [c, x_j - c]``."""
    x_i, x_j, c = (np.asarray(v, dtype=np.float64) for v in (x_i, x_j, c))
    return float(np.dot(np.concatenate([c, x_i - c]), np.concatenate([c, x_j - c])))


def infinite_width_predict(train_x, train_y, test_x, f0_train=None, f0_test=None, kernel="analytic_ntk",
                           shift=None):
    """Kernel-regression limit ``f0(x_t) - K_tX K_XX^{-1} (f0(X) - Y)``.

    ``kernel`` is ``"analytic_ntk"`` (inputs lifted with ``to_sphere``),
    ``"shifted_ntk"`` (the same after subtracting ``shift`` from every
    input), or a callable ``kernel(A, B) -> matrix`` such as an empirical
    NTK.  Missing ``f0`` arrays are treated as zero.  ``K_XX`` is factored
    by Cholesky; jitter (up to 1e-8 times the mean diagonal) is added only
    if the plain factorization fails.
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    test_x = np.atleast_2d(np.asarray(test_x, dtype=np.float64))
    if train_x.shape[0] == 1 and train_x.shape[1] != test_x.shape[1]:
        train_x = train_x.T
    train_y = np.asarray(train_y, dtype=np.float64).reshape(train_x.shape[0], -1)
    f0_train = np.zeros_like(train_y) if f0_train is None else np.asarray(f0_train, dtype=np.float64).reshape(train_y.shape)
    f0_test = (np.zeros((test_x.shape[0], train_y.shape[1])) if f0_test is None
               else np.asarray(f0_test, dtype=np.float64).reshape(test_x.shape[0], -1))

    if callable(kernel):
        kern = kernel
    elif kernel in ("analytic_ntk", "shifted_ntk"):
        c = 0.0 if (kernel == "analytic_ntk" or shift is None) else np.asarray(shift, dtype=np.float64)

        def kern(a, b):
            return ntk_gram(to_sphere(a - c), to_sphere(b - c))
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    k_xx = kern(train_x, train_x)
    k_tx = kern(test_x, train_x)
    scale = float(np.mean(np.diag(k_xx))) or 1.0
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            chol = cholesky(k_xx + jitter * scale * np.eye(len(k_xx)), lower=True, check_finite=False)
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise np.linalg.LinAlgError("K_XX singular beyond jitter")
    return f0_test - k_tx @ cho_solve((chol, True), f0_train - train_y, check_finite=False)


# ---------------------------------------------------------------------------
# empirical NTK
# ---------------------------------------------------------------------------


def param_jacobian(model: nn.MlpSurrogate, x, wrt: str = "all"):
    """Per-sample gradient of the scalar output w.r.t. parameters, shape ``(n, P)``.

    ``wrt="all"`` covers every weight and bias; ``wrt="first_layer"`` only
    the first weight matrix (the part whose infinite-width limit is the
    analytic ``h``).
    """
    if model.config.output_dim != 1:
        raise ValueError("empirical NTK needs a scalar-output model")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = nn._forward_cache(model, x, None)
    n = x.shape[0]
    delta = np.ones((n, 1))
    blocks = []
    for i in range(len(model.weights) - 1, -1, -1):
        gw = acts[i][:, :, None] * delta[:, None, :]
        blocks.append((i, gw.reshape(n, -1), delta.copy()))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    blocks.sort(key=lambda t: t[0])
    if wrt == "first_layer":
        return blocks[0][1]
    if wrt != "all":
        raise ValueError(f"wrt must be 'all' or 'first_layer', got {wrt!r}")
    return np.concatenate([np.concatenate([gw, gb], axis=1) for _, gw, gb in blocks], axis=1)


@dataclass
class KernelMatrix:
    entries: np.ndarray
    generator: str


def empirical_ntk(model: nn.MlpSurrogate, x, wrt: str = "all") -> KernelMatrix:
    """Gram matrix of parameter gradients at the model's current weights."""
    jac = param_jacobian(model, x, wrt)
    k = jac @ jac.T
    return KernelMatrix(0.5 * (k + k.T), "empirical_ntk")


def relative_frobenius(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass
class SpectrumProfile:
    frequencies: np.ndarray
    magnitudes: np.ndarray
    shift_c: float

    def normalized(self):
        """Magnitudes scaled to unit L2 norm."""
        norm = np.linalg.norm(self.magnitudes)
        return self.magnitudes / norm if norm > 0 else self.magnitudes.copy()


def spectrum_grid(n: int = SPECTRUM_GRID):
    """``n`` uniform points on ``[0, 1)`` and the reference point (grid midpoint)."""
    grid = np.arange(n) / n
    return grid, grid[n // 2]


def kernel_slice(grid, x0, shift_c=0.0, kernel="ntk", lengthscale=0.1):
    """Row ``k(x, x0)`` over a 1-D grid for the domain shifted by ``shift_c``.

    ``kernel="ntk"`` uses the analytic NTK after lifting ``x - c`` onto the
    sphere; ``kernel="rbf"`` is the shift-invariant control.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if kernel == "ntk":
        a = to_sphere((grid - shift_c)[:, None])
        b = to_sphere(np.array([[x0 - shift_c]]))
        return ntk_gram(a, b)[:, 0]
    if kernel == "rbf":
        d = (grid - shift_c) - (x0 - shift_c)
        return np.exp(-0.5 * d * d / (lengthscale * lengthscale))
    raise ValueError(f"unknown kernel {kernel!r}")


def kernel_spectrum(row, shift_c=0.0) -> SpectrumProfile:
    """Magnitude of the one-sided DFT of a kernel slice sampled on a power-of-two grid."""
    row = np.asarray(row, dtype=np.float64)
    n = row.size
    if n < 2 or n & (n - 1):
        raise ValueError(f"grid length must be a power of two, got {n}")
    mags = np.abs(np.fft.rfft(row))
    freqs = np.fft.rfftfreq(n, d=1.0 / n)
    return SpectrumProfile(freqs, mags, float(shift_c))


def spectrum_distance(p: SpectrumProfile, q: SpectrumProfile) -> float:
    return float(np.linalg.norm(p.normalized() - q.normalized()))
