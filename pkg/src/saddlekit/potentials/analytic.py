"""Closed-form model surfaces.

All energies and gradients broadcast over leading axes, so a whole batch of
bands (``(..., 2)``) is evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AnalyticDoubleWell",
    "QuadraticDemo",
    "analytic_energy_grad",
    "analytic_mep_reference",
    "DEFAULT_A",
    "DEFAULT_K",
]

DEFAULT_A = 0.38
DEFAULT_K = 7.5


def analytic_energy_grad(x, a: float = DEFAULT_A, k: float = DEFAULT_K):
    """Energy ``(x1^2 - 1)^2 + k (x2 - a (1 - x1^2))^2`` and its gradient."""
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    x2 = x[..., 1]
    w = x1 * x1 - 1.0
    s = x2 - a * (1.0 - x1 * x1)
    E = w * w + k * s * s
    g = np.empty_like(x)
    g[..., 0] = 4.0 * x1 * w + 4.0 * k * a * x1 * s
    g[..., 1] = 2.0 * k * s
    return E, g


def analytic_mep_reference(a: float = DEFAULT_A, n_points: int = 21):
    """Sampled exact path ``x2 = a (1 - x1^2)`` on ``x1 in [-1, 1]`` and its barrier (1)."""
    if n_points < 3:
        raise ValueError("n_points must be at least 3")
    x1 = np.linspace(-1.0, 1.0, n_points)
    return np.stack([x1, a * (1.0 - x1 * x1)], axis=-1), 1.0


@dataclass(frozen=True)
class AnalyticDoubleWell:
    """Two minima at ``(+-1, 0)`` joined by a curved valley; saddle ``(0, a)`` with E = 1."""

    a: float = DEFAULT_A
    k: float = DEFAULT_K
    dim: int = 2

    def energy(self, x):
        return analytic_energy_grad(x, self.a, self.k)[0]

    def gradient(self, x):
        return analytic_energy_grad(x, self.a, self.k)[1]

    def energy_gradient(self, x):
        return analytic_energy_grad(x, self.a, self.k)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        a, k = self.a, self.k
        s = x2 - a * (1.0 - x1 * x1)
        H = np.empty(x.shape + (2,))
        H[..., 0, 0] = 12.0 * x1 * x1 - 4.0 + 4.0 * k * a * s + 8.0 * k * a * a * x1 * x1
        H[..., 0, 1] = H[..., 1, 0] = 4.0 * k * a * x1
        H[..., 1, 1] = 2.0 * k
        return H

    def path_tangent(self, x):
        """Unit tangent of the exact valley curve at abscissa ``x1``."""
        x = np.asarray(x, dtype=float)
        t = np.stack([np.ones_like(x[..., 0]), -2.0 * self.a * x[..., 0]], axis=-1)
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    @property
    def saddle(self):
        return np.array([0.0, self.a])

    @property
    def minima(self):
        return np.array([-1.0, 0.0]), np.array([1.0, 0.0])


@dataclass(frozen=True)
class QuadraticDemo:
    """``E = x^T H x / 2`` with a fixed symmetric ``H``."""

    H: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=float)
        object.__setattr__(self, "H", 0.5 * (H + H.T))

    @property
    def dim(self):
        return self.H.shape[0]

    def energy(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.H, x)

    def gradient(self, x):
        return np.asarray(x, dtype=float) @ self.H

    def energy_gradient(self, x):
        return self.energy(x), self.gradient(x)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.H, x.shape + (self.dim,)).copy()
