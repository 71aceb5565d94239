"""Same-size 2D convolution with symmetric boundary handling and its exact transpose.

Images are plain 2D float64 arrays; kernels are odd-sized square arrays.
Padding is half-sample symmetric (``d c b a | a b c d``), i.e. numpy's
``"symmetric"`` mode.  The padded convolution is a linear map ``K`` on
``R^(h*w)``; :func:`conv2_adjoint` applies ``K.T`` exactly, including the
fold-back of the padded border onto the pixels it was mirrored from.
"""

from enum import Enum
from functools import lru_cache

import numpy as np


class BoundaryMode(Enum):
    SYMMETRIC = "symmetric"


def as_kernel(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ValueError("kernel has non-finite coefficients")
    return k


def _check(u: np.ndarray, k: np.ndarray, mode: BoundaryMode) -> None:
    if mode is not BoundaryMode.SYMMETRIC:
        raise ValueError(f"unsupported boundary mode {mode!r}")
    if u.ndim != 2 or u.size == 0:
        raise ValueError(f"expected a non-empty 2D image, got shape {u.shape}")
    # one mirror reflection must cover the kernel radius
    if k.shape[0] // 2 > min(u.shape):
        raise ValueError(f"kernel of size {k.shape[0]} is too large for image {u.shape}")


@lru_cache(maxsize=64)
def _pad_index(h: int, w: int, c: int) -> np.ndarray:
    # flat source index of every pixel in the padded grid
    idx = np.pad(np.arange(h * w).reshape(h, w), c, mode="symmetric")
    idx.setflags(write=False)
    return idx


def pad(u: np.ndarray, c: int) -> np.ndarray:
    if c == 0:
        return u
    h, w = u.shape
    return u.ravel()[_pad_index(h, w, c)]


def pad_adjoint(p: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    """Transpose of :func:`pad`: accumulate every padded pixel onto its source."""
    if c == 0:
        return p.copy()
    idx = _pad_index(h, w, c)
    return np.bincount(idx.ravel(), weights=p.ravel(), minlength=h * w).reshape(h, w)


def conv2(u, k, mode: BoundaryMode = BoundaryMode.SYMMETRIC) -> np.ndarray:
    """Same-size convolution ``(k * u)`` with symmetric padding.

    ``out[i, j] = sum_{a,b} k[a, b] * u_pad[i + c - a, j + c - b]`` where ``c``
    is the kernel radius, so a centered delta kernel is the identity.
    """
    u = np.asarray(u, dtype=np.float64)
    k = as_kernel(k)
    _check(u, k, mode)
    h, w = u.shape
    r = k.shape[0]
    c = r // 2
    p = pad(u, c)
    out = np.zeros((h, w))
    for a in range(r):
        for b in range(r):
            if k[a, b] != 0.0:
                out += k[a, b] * p[2 * c - a : 2 * c - a + h, 2 * c - b : 2 * c - b + w]
    return out


def conv2_adjoint(v, k, mode: BoundaryMode = BoundaryMode.SYMMETRIC) -> np.ndarray:
    """Apply the exact transpose of :func:`conv2` for kernel ``k``.

    In the interior this equals correlation with ``k`` (convolution with the
    rotated kernel); near the border the padded contributions are folded
    back, which the rotated-kernel shortcut gets wrong.
    """
    v = np.asarray(v, dtype=np.float64)
    k = as_kernel(k)
    _check(v, k, mode)
    h, w = v.shape
    r = k.shape[0]
    c = r // 2
    p = np.zeros((h + 2 * c, w + 2 * c))
    for a in range(r):
        for b in range(r):
            if k[a, b] != 0.0:
                p[2 * c - a : 2 * c - a + h, 2 * c - b : 2 * c - b + w] += k[a, b] * v
    return pad_adjoint(p, h, w, c)


def conv2_kernel_vjp(u, g, size: int, mode: BoundaryMode = BoundaryMode.SYMMETRIC) -> np.ndarray:
    """Gradient of ``<conv2(u, k), g>`` with respect to the ``size x size`` kernel ``k``.

    This is ``U.T @ g`` for the patch matrix ``U`` with ``conv2(u, k) == U @ k.ravel()``.
    """
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if u.shape != g.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {g.shape}")
    if size % 2 == 0 or size < 1:
        raise ValueError("kernel size must be odd and positive")
    _check(u, np.zeros((size, size)), mode)
    h, w = u.shape
    c = size // 2
    p = pad(u, c)
    out = np.empty((size, size))
    for a in range(size):
        for b in range(size):
            out[a, b] = np.vdot(g, p[2 * c - a : 2 * c - a + h, 2 * c - b : 2 * c - b + w])
    return out


def rotate180(k) -> np.ndarray:
    """``out[i, j] = k[r-1-i, r-1-j]``."""
    k = np.asarray(k, dtype=np.float64)
    return k[::-1, ::-1].copy()
