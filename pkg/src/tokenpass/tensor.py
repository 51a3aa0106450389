"""Dense numeric kernels.

Everything operates on numpy arrays. Matrices are 2-D row-major arrays; the
default dtype is float64, float32 is only used when the engine is asked for it.
Products go through numpy's BLAS binding: for a fixed BLAS thread count the
accumulation order, and so the result, is fixed from run to run.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_SQRT1_2 = 0.7071067811865476


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max is subtracted first)."""
    x = np.asarray(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalise each row of ``x`` to zero mean and unit (biased) variance."""
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma/beta of shape {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi written through erf. Accepts scalars or arrays."""
    x = np.asarray(x)
    out = 0.5 * x * (1.0 + erf(x * _SQRT1_2))
    return out if out.ndim else float(out)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype, copy=False)


def bilinear_upsample(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize a ``C x h x w`` stack to ``C x out_h x out_w``.

    Uses the half-pixel (align_corners=False) convention: output pixel ``i``
    samples input coordinate ``(i + 0.5) * in / out - 0.5``, clamped to the
    valid range, and interpolates linearly between its two neighbours. The
    resize is separable, so it is applied as ``Ry @ map @ Rx.T`` per channel.
    Every row of ``Ry`` and ``Rx`` sums to one, hence constant maps stay
    constant.
    """
    maps = np.asarray(maps)
    if not np.issubdtype(maps.dtype, np.floating):
        maps = maps.astype(np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects C x h x w, got {maps.shape}")
    _, h, w = maps.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("bilinear_upsample target size must be positive")
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample cannot shrink {h}x{w} to {out_h}x{out_w}")
    ry = _interp_matrix(h, out_h, maps.dtype)
    rx = _interp_matrix(w, out_w, maps.dtype)
    return np.einsum("oh,chw,pw->cop", ry, maps, rx, optimize=True)
