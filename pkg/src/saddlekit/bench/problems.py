"""Problem builders wiring potentials and covariance fields into the optimizers."""

from __future__ import annotations

import numpy as np

from ..dimer import DimerProblem
from ..neb import NebProblem
from ..potentials.analytic import AnalyticDoubleWell
from ..potentials.fields import TubeField2D, psd_sqrt_2x2

__all__ = ["analytic_neb_problem", "analytic_dimer_problem", "block_sqrt"]


def block_sqrt(blocks):
    """Symmetric square roots of PSD blocks ``(..., b, b)``."""
    blocks = np.asarray(blocks, dtype=float)
    if blocks.shape[-1] == 2:
        return psd_sqrt_2x2(blocks)
    w, V = np.linalg.eigh(blocks)
    return np.einsum("...ij,...j,...kj->...ik", V, np.sqrt(np.clip(w, 0.0, None)), V)


def _logdet_grad_2x2(field, h=1e-5):
    def grad(X, lam, m2):
        q = np.zeros_like(X)
        eps = h * np.maximum(1.0, np.linalg.norm(X, axis=-1))
        for j in range(2):
            vals = []
            for sgn in (1.0, -1.0):
                Y = X.copy()
                Y[..., j] += sgn * eps
                A = m2 * field.dense_batch(Y) + lam * np.eye(2)
                vals.append(np.log(A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]))
            q[..., j] = (vals[0] - vals[1]) / (2.0 * eps)
        return q

    return grad


def analytic_neb_problem(field: TubeField2D = None, noise_multiplier: float = 10.0, potential: AnalyticDoubleWell = None):
    pot = potential or AnalyticDoubleWell()
    field = field or TubeField2D(a=pot.a)
    a, b = pot.minima
    return NebProblem(
        start=a,
        end=b,
        energy_gradient=pot.energy_gradient,
        sigma_blocks=lambda X: field.dense_batch(X)[..., None, :, :],
        noise_sqrt=block_sqrt,
        noise_multiplier=noise_multiplier,
        logdet_grad=_logdet_grad_2x2(field),
    )


def analytic_dimer_problem(field: TubeField2D = None, noise_multiplier: float = 3.0, potential: AnalyticDoubleWell = None,
                           x0=(-0.62, 0.02), v0=(0.8, 0.6)):
    pot = potential or AnalyticDoubleWell()
    field = field or TubeField2D(a=pot.a)
    return DimerProblem(
        x0=np.asarray(x0, dtype=float),
        v0=np.asarray(v0, dtype=float),
        energy_gradient=pot.energy_gradient,
        sigma=field.dense_batch,
        noise_sqrt=block_sqrt,
        noise_multiplier=noise_multiplier,
        saddle=pot.saddle,
    )
