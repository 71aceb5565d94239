"""Synthetic noise and image-quality metrics (PSNR, SSIM)."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not (math.isfinite(self.level) and self.level > 0):
            raise ValueError("noise level must be positive and finite")

    @property
    def label(self) -> str:
        return f"sigma={self.level:g}" if self.kind == "gaussian" else f"peak={self.level:g}"

    def clean(self, u: np.ndarray, input_range: float = 255.0) -> np.ndarray:
        """Clean image in the domain the model works in."""
        u = np.asarray(u, dtype=np.float64)
        return u * (self.level / input_range) if self.kind == "poisson" else u

    def apply(self, u: np.ndarray, seed: int | None = None, input_range: float = 255.0) -> np.ndarray:
        seed = self.seed if seed is None else seed
        if self.kind == "gaussian":
            return add_gaussian_noise(u, self.level, seed)
        return add_poisson_noise(u, self.level, seed, input_range)


def add_gaussian_noise(u, sigma: float, seed: int) -> np.ndarray:
    """``u`` plus i.i.d. ``N(0, sigma^2)`` noise; never clipped."""
    u = np.asarray(u, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return u.copy()
    rng = np.random.default_rng(seed)
    return u + sigma * rng.standard_normal(u.shape)


def add_poisson_noise(u, peak: float, seed: int, input_range: float = 255.0) -> np.ndarray:
    """Rescale ``u`` from ``[0, input_range]`` to ``[0, peak]`` and draw Poisson counts."""
    u = np.asarray(u, dtype=np.float64)
    if peak <= 0:
        raise ValueError("peak must be positive")
    if np.any(u < 0):
        raise ValueError("Poisson noise needs non-negative intensities")
    rng = np.random.default_rng(seed)
    return rng.poisson(u * (peak / input_range)).astype(np.float64)


def psnr(u, gt, peak: float = 255.0) -> float:
    """``20 log10(peak / sqrt(MSE))`` in dB, capped at 99 dB for identical images."""
    u = np.asarray(u, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if u.shape != gt.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {gt.shape}")
    mse = float(np.mean((u - gt) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(peak / math.sqrt(mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim(u, gt, dynamic_range: float = 255.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all positions where the Gaussian window fits inside the image."""
    u = np.asarray(u, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if u.shape != gt.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {gt.shape}")
    if min(u.shape) < window:
        raise ValueError(f"image {u.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_x = _filter_valid(u, g)
    mu_y = _filter_valid(gt, g)
    sxx = _filter_valid(u * u, g) - mu_x * mu_x
    syy = _filter_valid(gt * gt, g) - mu_y * mu_y
    sxy = _filter_valid(u * gt, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
