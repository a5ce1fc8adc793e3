"""Stochastic force oracle: mean force plus stream-keyed correlated noise."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .. import rng
from ..covariance import BlockLocal, Dense, Diagonal, LowRank, noise_dim, sqrt_apply
from .fields import psd_sqrt_2x2

__all__ = ["StochasticForceOracle", "sample_force", "scale_operator"]


def scale_operator(op, c: float):
    """Return ``c * Sigma`` with the same variant."""
    if isinstance(op, Dense):
        return Dense(c * op.S)
    if isinstance(op, Diagonal):
        return Diagonal(c * op.v)
    if isinstance(op, LowRank):
        return LowRank(op.U, c * op.C)
    if isinstance(op, BlockLocal):
        return BlockLocal(op.d, tuple((idx, c * B) for idx, B in op.blocks))
    raise TypeError(f"unknown covariance operator {type(op).__name__}")


@dataclass
class StochasticForceOracle:
    """Returns ``F = -grad E(x) + m Sigma(x)^(1/2) xi`` and ``m^2 Sigma(x)``.

    ``xi`` is a pure function of the stream key, so identical keys give
    identical samples whatever the call order. ``call_counter`` tallies
    queries for budget audits only.
    """

    mean: object
    cov: object
    noise_multiplier: float = 1.0
    seed: int = 0
    call_counter: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, n: int = 1):
        with self._lock:
            self.call_counter += n


def _noise(op, xi):
    if isinstance(op, Dense) and op.dim == 2:
        return psd_sqrt_2x2(op.S) @ xi
    return sqrt_apply(op, xi)


def sample_force(oracle: StochasticForceOracle, x, stream_key: Tuple[int, int, int], tag: int = rng.TAG_FORCE):
    """One oracle query at ``x`` keyed by ``(seed, iteration, entity)``.

    Returns
    -------
    force : ndarray
    sigma : covariance operator, ``noise_multiplier^2 * Sigma(x)``
    """
    x = np.asarray(x, dtype=float)
    seed, iteration, entity = stream_key
    grad = oracle.mean.gradient(x)
    op = oracle.cov.sigma_at(x)
    m = float(oracle.noise_multiplier)
    oracle.count()
    if m == 0.0:
        return -grad, scale_operator(op, 0.0)
    xi = rng.normals(seed, iteration, entity, noise_dim(op), tag=tag)
    return -grad + m * _noise(op, xi), scale_operator(op, m * m)
