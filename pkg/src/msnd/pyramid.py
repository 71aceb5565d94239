"""Block-averaging down-sampling operators ``A`` and their exact transposes.

Output pixel ``(I, J)`` of a factor-``s`` operator covers the source
rectangle ``[I*s, (I+1)*s) x [J*s, (J+1)*s)`` clipped to the image.  Every
source pixel contributes its overlap area and the weights of each output
pixel are normalised to sum to one.  For integer ``s`` this is the plain
mean over ``s x s`` blocks; fractional factors use the same area rule.
The 2D map is separable, ``A u = R_h @ u @ R_w.T``.
"""

import math
from dataclasses import dataclass, field

import numpy as np


def area_weights(factor: float, n: int) -> np.ndarray:
    """Row-normalised 1D area-overlap matrix of shape ``(ceil(n / factor), n)``."""
    m = math.ceil(n / factor - 1e-12)
    R = np.zeros((m, n))
    for i in range(m):
        lo, hi = i * factor, min((i + 1) * factor, n)
        for p in range(int(math.floor(lo)), int(math.ceil(hi))):
            overlap = min(p + 1.0, hi) - max(float(p), lo)
            if overlap > 0:
                R[i, p] = overlap
    R /= R.sum(axis=1, keepdims=True)
    return R


@dataclass(frozen=True)
class ScaleOperator:
    """Down-sampling by ``factor`` from ``(src_h, src_w)`` to ``(dst_h, dst_w)``.

    ``factor == 1`` is the identity scale used for the native resolution.
    """

    factor: float
    src_h: int
    src_w: int
    rows: np.ndarray = field(repr=False, compare=False)
    cols: np.ndarray = field(repr=False, compare=False)

    @property
    def dst_h(self) -> int:
        return self.rows.shape[0]

    @property
    def dst_w(self) -> int:
        return self.cols.shape[0]

    @property
    def is_identity(self) -> bool:
        return self.factor == 1.0

    @classmethod
    def identity(cls, h: int, w: int) -> "ScaleOperator":
        return cls(1.0, h, w, np.eye(h), np.eye(w))

    def down(self, u: np.ndarray) -> np.ndarray:
        if u.shape != (self.src_h, self.src_w):
            raise ValueError(f"expected image of shape {(self.src_h, self.src_w)}, got {u.shape}")
        if self.is_identity:
            return np.array(u, dtype=np.float64)
        return self.rows @ u @ self.cols.T

    def up(self, v: np.ndarray) -> np.ndarray:
        if v.shape != (self.dst_h, self.dst_w):
            raise ValueError(f"expected image of shape {(self.dst_h, self.dst_w)}, got {v.shape}")
        if self.is_identity:
            return np.array(v, dtype=np.float64)
        return self.rows.T @ v @ self.cols

    def matrix(self) -> np.ndarray:
        """Dense ``(dst_h*dst_w, src_h*src_w)`` matrix, for tests and small grids."""
        return np.kron(self.rows, self.cols)


def make_scale_operator(factor: float, src_h: int, src_w: int) -> ScaleOperator:
    factor = float(factor)
    if not math.isfinite(factor) or factor <= 1.0:
        raise ValueError(f"scale factor must be finite and > 1, got {factor}")
    if min(src_h, src_w) < factor:
        raise ValueError(f"image {src_h}x{src_w} is smaller than the scale factor {factor}")
    return ScaleOperator(factor, src_h, src_w, area_weights(factor, src_h), area_weights(factor, src_w))


def downsample(op: ScaleOperator, u: np.ndarray) -> np.ndarray:
    return op.down(np.asarray(u, dtype=np.float64))


def upsample_adjoint(op: ScaleOperator, v: np.ndarray) -> np.ndarray:
    return op.up(np.asarray(v, dtype=np.float64))


def scale_operators(factors, h: int, w: int) -> list[ScaleOperator]:
    """Identity scale followed by one operator per configured factor."""
    return [ScaleOperator.identity(h, w)] + [make_scale_operator(s, h, w) for s in factors]
