"""Influence functions as weighted sums of Gaussian radial basis functions.

``phi(x) = sum_j w_j * exp(-(x - mu_j)**2 / (2 * gamma**2))`` with equidistant
centers ``mu`` and width ``gamma`` equal to the center spacing.  Only the
weights are trainable.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RbfConfig:
    """Basis layout shared by every influence function of a model."""

    num: int = 63
    vmin: float = -310.0
    vmax: float = 310.0
    gamma: float | None = None

    def __post_init__(self):
        if self.num < 2:
            raise ValueError("need at least two basis functions")
        if not self.vmax > self.vmin:
            raise ValueError("vmax must exceed vmin")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.vmin, self.vmax, self.num)

    @property
    def width(self) -> float:
        if self.gamma is not None:
            return float(self.gamma)
        return (self.vmax - self.vmin) / (self.num - 1)

    @classmethod
    def for_range(cls, amplitude: float, num: int = 63) -> "RbfConfig":
        """Symmetric layout on ``[-amplitude, amplitude]``."""
        return cls(num=num, vmin=-float(amplitude), vmax=float(amplitude))


def basis(z: np.ndarray, centers: np.ndarray, gamma: float) -> np.ndarray:
    """The ``(len(z), M)`` matrix ``G(z)``."""
    z = np.asarray(z, dtype=np.float64).ravel()
    d = z[:, None] - centers[None, :]
    return np.exp(-(d * d) / (2.0 * gamma * gamma))


def evaluate(z, weights, centers, gamma):
    """Return ``(phi(z), phi'(z), G(z))`` for flat ``z``.

    The basis matrix is returned so that a backward pass can reuse it for
    the weight pullback ``G.T @ v``.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    G = basis(z, centers, gamma)
    val = G @ weights
    d = (centers[None, :] - z[:, None]) / (gamma * gamma)
    der = (G * d) @ weights
    return val, der, G


@dataclass
class RbfInfluence:
    weights: np.ndarray
    centers: np.ndarray
    gamma: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.weights.shape != self.centers.shape or self.weights.ndim != 1:
            raise ValueError("weights and centers must be vectors of equal length")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def from_config(cls, config: RbfConfig, weights=None) -> "RbfInfluence":
        if weights is None:
            weights = np.zeros(config.num)
        return cls(weights, config.centers, config.width)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return (basis(z, self.centers, self.gamma) @ self.weights).reshape(z.shape)

    def derivative(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        _, der, _ = evaluate(z, self.weights, self.centers, self.gamma)
        return der.reshape(z.shape)

    def weight_vjp(self, z, v) -> np.ndarray:
        """``G(z).T @ v``: pull ``v`` back onto the weights."""
        z = np.asarray(z, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if z.shape != v.shape:
            raise ValueError(f"length mismatch {z.shape} vs {v.shape}")
        return basis(z, self.centers, self.gamma).T @ v.ravel()


def lorentzian_weights(config: RbfConfig) -> np.ndarray:
    """Least-squares weights making phi match ``2x / (1 + x**2)`` on the centers."""
    mu = config.centers
    G = basis(mu, mu, config.width)
    target = 2.0 * mu / (1.0 + mu * mu)
    w, *_ = np.linalg.lstsq(G, target, rcond=None)
    return w
