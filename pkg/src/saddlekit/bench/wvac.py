"""Monovacancy hop in a bcc metal described by a tabulated EAM potential.

Builds the relaxed endpoints, the core-localized covariance field and an
:class:`~saddlekit.neb.NebProblem` over flat ``3N`` configurations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from ..errors import ConvergenceError
from ..neb import NebProblem
from ..potentials.eam import EamFs, PairList, energy_forces_batch
from ..potentials.fields import CoreField3D
from ..potentials.lattice import Supercell, build_vacancy_supercell, minimum_image
from ..potentials.setfl import EamTables
from .problems import block_sqrt

__all__ = ["BandEnergy", "VacancyHop", "build_vacancy_hop", "relax"]

FORCE_TOL = 1e-4  # eV/Angstrom, endpoint relaxation target


class BandEnergy:
    """Batched EAM energies and gradients for configurations near a fixed reference.

    One pair list with per-atom margins covers every configuration that stays
    inside the margins. A configuration that leaves them is evaluated with a
    list built from that configuration alone, so results never depend on how
    configurations are batched.
    """

    def __init__(self, pot: EamFs, cell: Supercell, reference, margins, backend: Optional[str] = None):
        self.pot = pot
        self.cell = cell.cell
        self.pbc = cell.pbc
        self.types = pot.type_indices(cell.species)
        self.backend = backend
        self.pairs = PairList.build(reference, cell.cell, pot.cutoff, pbc=cell.pbc, margins=margins)
        self.n_atoms = cell.n_atoms

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        pos = X.reshape((-1, self.n_atoms, 3))
        disp = np.linalg.norm(pos - self.pairs.reference, axis=-1)
        ok = np.all(disp < self.pairs.margins, axis=-1)
        E = np.empty(pos.shape[0])
        F = np.empty_like(pos)
        if np.any(ok):
            E[ok], F[ok] = energy_forces_batch(self.pot, pos[ok], self.cell, self.types, self.pairs, self.backend)
        for b in np.flatnonzero(~ok):
            own = PairList.build(pos[b], self.cell, self.pot.cutoff, 0.1, self.pbc)
            e, f = energy_forces_batch(self.pot, pos[b][None], self.cell, self.types, own, self.backend)
            E[b], F[b] = e[0], f[0]
        return E.reshape(lead), (-F).reshape(X.shape)


def relax(pot: EamFs, cell: Supercell, tol: float = FORCE_TOL, max_iter: int = 5000, backend: Optional[str] = None) -> Supercell:
    """Relax free atoms with L-BFGS until the largest atomic force is below ``tol``."""
    mask = cell.dof_mask()
    x0 = cell.flat()
    free = np.flatnonzero(mask)
    types = pot.type_indices(cell.species)
    state = {"pairs": PairList.build(cell.positions, cell.cell, pot.cutoff, 0.6, cell.pbc)}

    def eval_full(x):
        pos = x.reshape(-1, 3)
        if not state["pairs"].covers(pos):
            state["pairs"] = PairList.build(pos, cell.cell, pot.cutoff, 0.6, cell.pbc)
        E, F = energy_forces_batch(pot, pos[None], cell.cell, types, state["pairs"], backend)
        return float(E[0]), -F[0].ravel()

    def fun(y):
        x = x0.copy()
        x[free] = y
        E, g = eval_full(x)
        return E, g[free]

    y = x0[free]
    for _ in range(4):
        res = minimize(fun, y, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": tol / 10.0, "ftol": 1e-16, "maxcor": 30})
        y = res.x
        x = x0.copy()
        x[free] = y
        _, g = eval_full(x)
        fmax = float(np.max(np.linalg.norm((g * mask).reshape(-1, 3), axis=1)))
        if fmax <= tol:
            return cell.with_flat(x)
    raise ConvergenceError(f"endpoint relaxation stalled at max force {fmax:.3e} eV/A", residual=fmax, iterations=max_iter)


@dataclass
class VacancyHop:
    start: Supercell
    end: Supercell
    migrating: int
    frozen: int
    field: CoreField3D
    energy: BandEnergy
    E_start: float
    E_end: float

    def problem(self, noise_multiplier: float = 1.0, n_images: int = 7) -> NebProblem:
        a = self.start.flat()
        b = self.end.flat()
        return NebProblem(
            start=a,
            end=b,
            energy_gradient=self.energy,
            sigma_blocks=self.field.atom_blocks,
            noise_sqrt=block_sqrt,
            noise_multiplier=noise_multiplier,
            mask=self.start.dof_mask().astype(float),
        )

    def progress(self, X) -> np.ndarray:
        """Migrating-atom projection onto the hop axis, as a fraction of the hop length."""
        X = np.asarray(X, dtype=float)
        pos = X.reshape(X.shape[:-1] + (-1, 3))
        return self.field.progress(pos)


def build_vacancy_hop(tables: EamTables, n_cells: int = 4, a0: Optional[float] = None, n_images: int = 7,
                      backend: Optional[str] = None, **field_kw) -> VacancyHop:
    """Relaxed endpoints of a nearest-neighbor vacancy hop and its covariance field.

    The start has the vacancy at the origin; in the end configuration the
    migrating neighbor occupies the origin. The atom farthest from the hop
    midpoint is frozen to remove rigid translations.
    """
    pot = EamFs.from_tables(tables)
    a0 = float(a0 if a0 is not None else tables.lattice_constants[0])
    species = tables.elements[0]
    cell, hop = build_vacancy_supercell(n_cells, a0, species)
    mig = hop.migrating
    site_a = cell.positions[mig].copy()
    mid = 0.5 * (site_a + hop.vacancy_site)
    dist = np.linalg.norm(minimum_image(cell.positions - mid, cell.cell), axis=1)
    frozen_idx = int(np.argmax(dist))
    frozen = np.zeros(cell.n_atoms, dtype=bool)
    frozen[frozen_idx] = True
    start = Supercell(cell.cell, cell.positions, cell.species, cell.pbc, frozen, hop.vacancy_site)
    pos_b = cell.positions.copy()
    pos_b[mig] = hop.vacancy_site
    end = Supercell(cell.cell, pos_b, cell.species, cell.pbc, frozen, site_a)
    start = relax(pot, start, backend=backend)
    end = relax(pot, end, backend=backend)
    axis = end.positions[mig] - start.positions[mig]
    field = CoreField3D(
        core_center=mid,
        hop_axis=axis,
        hop_length=float(np.linalg.norm(axis)),
        cell=cell.cell,
        migrating=mig,
        hop_start=start.positions[mig],
        **field_kw,
    )
    ref = 0.5 * (start.positions + end.positions)
    spread = np.linalg.norm(start.positions - ref, axis=1)
    margins = spread + 0.5
    energy = BandEnergy(pot, start, ref, margins, backend)
    E = energy(np.stack([start.flat(), end.flat()]))[0]
    return VacancyHop(start, end, mig, frozen_idx, field, energy, float(E[0]), float(E[1]))
