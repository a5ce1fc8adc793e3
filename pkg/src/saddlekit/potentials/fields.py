"""Prescribed, position-dependent force-covariance fields.

Each field exposes ``sigma_at(x)`` returning a covariance operator, plus a
batched evaluator used by the vectorized optimizers (``dense_batch`` for the
planar tube, ``atom_blocks`` for the atomistic core field).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..covariance import BlockLocal, Dense
from .analytic import DEFAULT_A

__all__ = ["TubeField2D", "CoreField3D", "ConstantField", "psd_sqrt_2x2"]


def psd_sqrt_2x2(M):
    """Symmetric square root of PSD 2x2 matrices, elementwise closed form.

    Used instead of an eigensolver so a batched call and a single call give
    bit-identical results.
    """
    M = np.asarray(M, dtype=float)
    det = np.clip(M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0], 0.0, None)
    s = np.sqrt(det)
    t = np.sqrt(np.clip(M[..., 0, 0] + M[..., 1, 1] + 2.0 * s, 0.0, None))
    safe = np.where(t > 0, t, 1.0)
    out = (M + s[..., None, None] * np.eye(2)) / safe[..., None, None]
    return np.where((t > 0)[..., None, None], out, 0.0)


@dataclass(frozen=True)
class TubeField2D:
    """Anisotropic noise tube around the transition region of the double well.

    The principal frame is the exact-valley tangent/normal frame at abscissa
    ``x1``, rotated by ``rotation_theta``. Tangential and normal variances are
    ``env(x)^2 (amp^2 + floor^2)`` with ``env = exp(-x1^2 / (2 width^2))``,
    and ``iso_floor^2 I`` is added everywhere, so the far field is isotropic.
    """

    sigma_t_amp: float = 0.030
    sigma_n_amp: float = 0.260
    rotation_theta: float = 0.0
    floor_t: float = 0.012
    floor_n: float = 0.020
    iso_floor: float = 0.006
    width: float = 0.35
    a: float = DEFAULT_A
    floors_enveloped: bool = True

    dim: int = 2

    def envelope(self, x):
        x1 = np.asarray(x, dtype=float)[..., 0]
        return np.exp(-x1 * x1 / (2.0 * self.width**2))

    def frame(self, x):
        """Rotated principal axes ``(e_t, e_n)``, each of shape ``(..., 2)``."""
        x1 = np.asarray(x, dtype=float)[..., 0]
        phi = np.arctan2(-2.0 * self.a * x1, np.ones_like(x1)) + self.rotation_theta
        et = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        en = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
        return et, en

    def dense_batch(self, x):
        env2 = self.envelope(x) ** 2
        if self.floors_enveloped:
            lt = env2 * (self.sigma_t_amp**2 + self.floor_t**2)
            ln = env2 * (self.sigma_n_amp**2 + self.floor_n**2)
        else:
            lt = env2 * self.sigma_t_amp**2 + self.floor_t**2
            ln = env2 * self.sigma_n_amp**2 + self.floor_n**2
        et, en = self.frame(x)
        S = lt[..., None, None] * et[..., :, None] * et[..., None, :]
        S = S + ln[..., None, None] * en[..., :, None] * en[..., None, :]
        return S + self.iso_floor**2 * np.eye(2)

    def sigma_at(self, x):
        return Dense(self.dense_batch(np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class ConstantField:
    """Position-independent covariance."""

    op: object

    @property
    def dim(self):
        return self.op.dim

    def sigma_at(self, x):
        return self.op


@dataclass(frozen=True)
class CoreField3D:
    """Per-atom noise localized at a vacancy hop.

    Atom ``i`` at position ``p_i`` gets the 3x3 block

        a_i^2 [ transverse_amp^2 (I - u u^T) + parallel_amp^2 u u^T ] + floor^2 I

    where ``u`` is the unit hop axis and ``a_i`` is a Gaussian in the
    minimum-image distance from ``p_i`` to the hop midpoint (width
    ``core_radius``) times a Gaussian gate of width ``midpoint_width`` in the
    migrating atom's fractional progress along the hop.
    """

    core_center: np.ndarray
    hop_axis: np.ndarray
    hop_length: float
    cell: np.ndarray
    migrating: int
    hop_start: np.ndarray
    core_radius: float = 4.2
    midpoint_width: float = 0.30
    floor: float = 0.010
    parallel_amp: float = 0.045
    transverse_amp: float = 0.350
    _cell_inv: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        u = np.asarray(self.hop_axis, dtype=float)
        object.__setattr__(self, "hop_axis", u / np.linalg.norm(u))
        object.__setattr__(self, "core_center", np.asarray(self.core_center, dtype=float))
        object.__setattr__(self, "hop_start", np.asarray(self.hop_start, dtype=float))
        cell = np.asarray(self.cell, dtype=float)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "_cell_inv", np.linalg.inv(cell))

    def _min_image(self, dr):
        frac = dr @ self._cell_inv
        frac -= np.round(frac)
        return frac @ self.cell

    def progress(self, pos):
        """Fractional hop progress of the migrating atom; ``pos`` is ``(..., N, 3)``."""
        dr = self._min_image(pos[..., self.migrating, :] - self.hop_start)
        return dr @ self.hop_axis / self.hop_length

    def amplitudes(self, pos):
        pos = np.asarray(pos, dtype=float)
        dr = self._min_image(pos - self.core_center)
        r2 = np.einsum("...i,...i->...", dr, dr)
        radial = np.exp(-r2 / (2.0 * self.core_radius**2))
        s = self.progress(pos)
        gate = np.exp(-((s - 0.5) ** 2) / (2.0 * self.midpoint_width**2))
        return radial * gate[..., None]

    def atom_blocks(self, x):
        """Per-atom covariance blocks, shape ``(..., N, 3, 3)``, floor included."""
        x = np.asarray(x, dtype=float)
        pos = x.reshape(x.shape[:-1] + (-1, 3))
        amp2 = self.amplitudes(pos) ** 2
        u = self.hop_axis
        P = np.outer(u, u)
        base = self.transverse_amp**2 * (np.eye(3) - P) + self.parallel_amp**2 * P
        return amp2[..., None, None] * base + self.floor**2 * np.eye(3)

    def sigma_at(self, x):
        B = self.atom_blocks(x)
        N = B.shape[0]
        blocks = tuple((np.arange(3 * i, 3 * i + 3), B[i]) for i in range(N))
        return BlockLocal(3 * N, blocks)
