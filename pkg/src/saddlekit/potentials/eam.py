"""Embedded-atom energies and forces from tabulated potentials.

Tables are interpolated with natural cubic splines on their uniform grids;
the pair term is splined as ``r * phi(r)`` and divided by ``r`` afterwards.
Forces are the exact negative gradient of the interpolated energy.

The inner pair loop runs in a compiled extension when it is importable and
falls back to a vectorized numpy version otherwise (or when the environment
variable ``SADDLEKIT_PURE_PYTHON`` is set).
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from ..errors import ContractError, NumericalError
from . import _eam_numpy
from .setfl import EamTables

try:
    if os.environ.get("SADDLEKIT_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _eam_kernel as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"

__all__ = ["EamFs", "PairList", "eam_energy_forces", "energy_forces_batch", "BACKEND", "backend_function"]


def _coefficients(values, h):
    """Per-interval cubic coefficients ``(K-1, 4)`` in descending powers."""
    x = np.arange(values.shape[-1]) * h
    return np.ascontiguousarray(CubicSpline(x, values, bc_type="natural").c.T)


@dataclass(frozen=True)
class EamFs:
    """Tables plus their spline coefficients, ready for evaluation."""

    tables: EamTables
    F_c: np.ndarray
    rho_c: np.ndarray
    rphi_c: np.ndarray

    @classmethod
    def from_tables(cls, tables: EamTables) -> "EamFs":
        ne = tables.n_elements
        F_c = np.stack([_coefficients(tables.embedding[a], tables.drho) for a in range(ne)])
        rho_c = np.empty((ne, ne, tables.nr - 1, 4))
        rphi_c = np.empty((ne, ne, tables.nr - 1, 4))
        for a in range(ne):
            for b in range(ne):
                rho_c[a, b] = _coefficients(tables.density[a, b], tables.dr)
                rphi_c[a, b] = _coefficients(tables.rphi[a, b], tables.dr)
        return cls(tables, np.ascontiguousarray(F_c), rho_c, rphi_c)

    @property
    def cutoff(self):
        return self.tables.cutoff

    def type_indices(self, species):
        lookup = {s: k for k, s in enumerate(self.tables.elements)}
        try:
            return np.array([lookup[s] for s in species], dtype=np.intp)
        except KeyError as exc:
            raise ContractError(f"species {exc.args[0]!r} not in potential {self.tables.elements}") from None


@dataclass(frozen=True)
class PairList:
    """Half list of ``(i, j, image shift)`` with reference separation below ``cutoff + skin``.

    Valid for any configuration whose two largest atomic displacements from
    ``reference`` sum to less than ``skin``. With per-atom ``margins`` a pair
    is kept when its reference separation is below ``cutoff + m_i + m_j`` and
    the list is valid while every atom stays within its own margin.
    """

    pair_i: np.ndarray
    pair_j: np.ndarray
    shifts: np.ndarray  # Cartesian, (P, 3)
    reference: np.ndarray
    cutoff: float
    skin: float
    margins: Optional[np.ndarray] = None

    def covers(self, pos) -> bool:
        pos = np.asarray(pos, dtype=float).reshape(-1, *self.reference.shape)
        disp = np.linalg.norm(pos - self.reference, axis=-1)
        if self.margins is not None:
            return bool(np.all(disp < self.margins))
        if disp.shape[-1] < 2:
            return True
        top2 = np.sort(disp, axis=-1)[..., -2:].sum(axis=-1)
        return bool(np.all(top2 < self.skin))

    @classmethod
    def build(cls, reference, cell, cutoff: float, skin: float = 1.0, pbc=(True, True, True), margins=None) -> "PairList":
        ref = np.asarray(reference, dtype=float)
        cell = np.asarray(cell, dtype=float)
        if margins is not None:
            margins = np.asarray(margins, dtype=float)
            if margins.shape != (ref.shape[0],) or np.any(margins <= 0):
                raise ContractError("margins must be positive, one per atom")
            skin = 2.0 * float(margins.max())
        radius = cutoff + skin
        # number of images needed along each lattice vector from the face spacings
        vol = abs(np.linalg.det(cell))
        widths = np.array([vol / np.linalg.norm(np.cross(cell[(k + 1) % 3], cell[(k + 2) % 3])) for k in range(3)])
        extent = np.linalg.norm(ref.max(axis=0) - ref.min(axis=0))
        reach = [int(np.ceil((radius + extent) / widths[k])) if pbc[k] else 0 for k in range(3)]
        N = ref.shape[0]
        iu, ju = np.triu_indices(N, k=1)
        I, J, S = [], [], []
        for n in itertools.product(*(range(-m, m + 1) for m in reach)):
            n = np.array(n, dtype=float)
            shift = n @ cell
            zero = not np.any(n)
            positive = tuple(n) > (0.0, 0.0, 0.0)
            if zero:
                ii, jj = iu, ju
            elif positive:
                ii, jj = np.concatenate([iu, ju, np.arange(N)]), np.concatenate([ju, iu, np.arange(N)])
            else:
                continue
            # for a negative shift n, pair (i, j, n) equals (j, i, -n), already counted
            vec = ref[jj] + shift - ref[ii]
            lim = radius if margins is None else cutoff + margins[ii] + margins[jj]
            keep = np.einsum("pk,pk->p", vec, vec) < lim * lim
            I.append(ii[keep])
            J.append(jj[keep])
            S.append(np.broadcast_to(shift, (int(keep.sum()), 3)))
        pair_i = np.ascontiguousarray(np.concatenate(I), dtype=np.intp)
        pair_j = np.ascontiguousarray(np.concatenate(J), dtype=np.intp)
        shifts = np.ascontiguousarray(np.concatenate(S), dtype=float)
        order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], pair_j, pair_i))
        return cls(pair_i[order], pair_j[order], shifts[order], ref.copy(), float(cutoff), float(skin),
                   None if margins is None else margins.copy())


def backend_function(name: Optional[str] = None):
    """The ``eam_batch`` implementation for ``name`` in {"cython", "numpy"} (default: active one)."""
    name = name or BACKEND
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled EAM kernel is not built")
        return _compiled.eam_batch
    if name == "numpy":
        return _eam_numpy.eam_batch
    raise ValueError(f"unknown backend {name!r}")


def energy_forces_batch(pot: EamFs, pos, cell, types, pairs: PairList, backend: Optional[str] = None):
    """Energies ``(B,)`` and forces ``(B, N, 3)`` for configurations ``pos`` of shape ``(B, N, 3)``."""
    pos = np.ascontiguousarray(pos, dtype=float)
    if pos.ndim == 2:
        pos = pos[None]
    if not pairs.covers(pos):
        raise ContractError("pair list does not cover these configurations; rebuild it")
    t = pot.tables
    E, F, rmin = backend_function(backend)(
        pos, pairs.shifts, pairs.pair_i, pairs.pair_j, np.ascontiguousarray(types, dtype=np.intp),
        pot.F_c, pot.rho_c, pot.rphi_c, t.drho, t.dr, t.cutoff, t.nrho, t.nr,
    )
    if rmin < t.dr:
        raise ContractError(f"pair distance {rmin:.3e} below the first table point {t.dr:.3e}")
    E = np.asarray(E)
    F = np.asarray(F)
    if not (np.all(np.isfinite(E)) and np.all(np.isfinite(F))):
        raise NumericalError("non-finite EAM energy or force")
    return E, F


def eam_energy_forces(pot: EamFs, cell, skin: float = 0.3, backend: Optional[str] = None):
    """Energy (eV) and forces (N x 3, eV/Angstrom) of a :class:`Supercell`."""
    pairs = PairList.build(cell.positions, cell.cell, pot.cutoff, skin, cell.pbc)
    E, F = energy_forces_batch(pot, cell.positions[None], cell.cell, pot.type_indices(cell.species), pairs, backend)
    return float(E[0]), F[0]
