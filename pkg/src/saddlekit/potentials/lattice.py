"""Periodic supercells and the bcc monovacancy builder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np

from ..errors import ContractError

__all__ = ["Supercell", "HopPair", "build_vacancy_supercell", "minimum_image"]


@dataclass(frozen=True)
class Supercell:
    """Cartesian positions (Angstrom) in a periodic cell whose rows are lattice vectors."""

    cell: np.ndarray
    positions: np.ndarray
    species: Tuple[str, ...]
    pbc: Tuple[bool, bool, bool] = (True, True, True)
    frozen: Optional[np.ndarray] = None
    vacancy_site: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        cell = np.array(self.cell, dtype=float)
        if cell.shape != (3, 3) or pos.ndim != 2 or pos.shape[1] != 3:
            raise ContractError("cell must be 3x3 and positions N x 3")
        if len(self.species) != pos.shape[0]:
            raise ContractError("one species label per atom is required")
        frozen = np.zeros(pos.shape[0], dtype=bool) if self.frozen is None else np.array(self.frozen, dtype=bool)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "frozen", frozen)

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def flat(self) -> np.ndarray:
        return self.positions.ravel().copy()

    def with_flat(self, x) -> "Supercell":
        return replace(self, positions=np.asarray(x, dtype=float).reshape(-1, 3))

    def dof_mask(self) -> np.ndarray:
        """Flat boolean mask of free Cartesian components."""
        return np.repeat(~self.frozen, 3)


class HopPair(NamedTuple):
    vacancy_site: np.ndarray
    migrating: int


def minimum_image(dr, cell):
    cell = np.asarray(cell, dtype=float)
    frac = np.asarray(dr, dtype=float) @ np.linalg.inv(cell)
    frac -= np.round(frac)
    return frac @ cell


def build_vacancy_supercell(n_cells: int, a0: float, species: str = "W"):
    """bcc crystal of ``n_cells^3`` cubic cells with the atom at the origin removed.

    Returns the cell and the hop pair: the empty site and the index of the
    nearest neighbor at ``a0 (1/2, 1/2, 1/2)`` that will jump into it.
    """
    if n_cells < 2:
        raise ContractError("n_cells must be at least 2")
    if a0 <= 0:
        raise ContractError("lattice constant must be positive")
    grid = np.array([(i, j, k) for i in range(n_cells) for j in range(n_cells) for k in range(n_cells)], dtype=float)
    sites = np.concatenate([grid, grid + 0.5]) * a0
    order = np.lexsort((sites[:, 2], sites[:, 1], sites[:, 0]))
    sites = sites[order]
    vac = np.zeros(3)
    keep = np.linalg.norm(sites - vac, axis=1) > 1e-9
    pos = sites[keep]
    target = 0.5 * a0 * np.ones(3)
    mig = int(np.argmin(np.linalg.norm(pos - target, axis=1)))
    cell = Supercell(
        cell=np.eye(3) * n_cells * a0,
        positions=pos,
        species=(species,) * pos.shape[0],
        vacancy_site=vac,
    )
    return cell, HopPair(vac, mig)
